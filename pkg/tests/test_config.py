import json

import pytest

from semfield.config import (ConfigError, apply_overrides, build_config,
                             config_to_dict, default_config, load_config)


def test_defaults():
    cfg = default_config()
    assert cfg.scene.dims == (64, 64, 16)
    assert cfg.train.dtype == "float32"
    assert cfg.field.image_width == cfg.scene.image_width
    assert cfg.voxelize.n_sub == 8 and cfg.voxelize.tau is None
    assert cfg.io.out_dir == "out"


def test_range_analogs_crop_driving_direction_only():
    cfg = default_config()  # 64x64x16 at 0.2 m
    assert cfg.eval_ranges() == [(3.2, 12.8, 3.2), (6.4, 12.8, 3.2), (12.8, 12.8, 3.2)]


def test_explicit_ranges_win():
    cfg = build_config({"eval": {"ranges": [[1.0, 2.0, 0.5]]}})
    assert cfg.eval_ranges() == [(1.0, 2.0, 0.5)]
    with pytest.raises(ConfigError):
        build_config({"eval": {"ranges": [[1.0, 2.0]]}})


def test_rig_section_maps_to_scene():
    cfg = build_config({"rig": {"image_width": 32, "image_height": 24, "baseline": 0.8}})
    assert cfg.scene.image_width == 32
    assert cfg.scene.baseline == 0.8
    # the conditioning encoder follows the scene resolution
    assert cfg.field.image_width == 32 and cfg.field.image_height == 24


def test_field_section_can_pin_resolution():
    cfg = build_config({"rig": {"image_width": 32, "image_height": 24},
                        "field": {"image_width": 64, "image_height": 48}})
    assert cfg.field.image_width == 64


def test_scene_noise_subsection():
    cfg = build_config({"scene": {"noise": {"flip_rate": 0.1}}})
    assert cfg.scene.noise.flip_rate == 0.1
    with pytest.raises(ConfigError):
        build_config({"scene": {"noise": {"nope": 1}}})


def test_mode_selects_training_dtype():
    assert build_config({"mode": "float64"}).train.dtype == "float64"
    assert build_config({"mode": "float32"}).train.dtype == "float32"
    with pytest.raises(ConfigError):
        build_config({"mode": "double"})
    with pytest.raises(ConfigError):
        build_config({"mode": "float64", "train": {"dtype": "float32"}})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        build_config({"junk": {}})
    with pytest.raises(ConfigError):
        build_config({"scene": {"color": 3}})
    with pytest.raises(ConfigError):
        build_config({"rig": {"speed": 2.0}})
    with pytest.raises(ConfigError):
        build_config({"train": {"weights": {"lambda_nope": 1}}})


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError):
        build_config({"train": {"patch_size": 1}})
    with pytest.raises(ConfigError):
        build_config({"train": {"sem_frame_mode": "sideways"}})


def test_overrides_parse_json_with_string_fallback():
    raw = {}
    apply_overrides(raw, ["train.lr=0.0003", "scene.dims=[48,48,12]",
                          "train.sem_frame_mode=front_only",
                          "train.use_semantic=false"])
    cfg = build_config(raw)
    assert cfg.train.lr == 0.0003
    assert cfg.scene.dims == (48, 48, 12)
    assert cfg.train.sem_frame_mode == "front_only"
    assert cfg.train.use_semantic is False


def test_override_shape_errors():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["=5"])


def test_load_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"train": {"steps": 7}}))
    cfg = load_config(str(p), ["train.steps=9"])
    assert cfg.train.steps == 9
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_config_dict_round_trips():
    cfg = build_config({"scene": {"dims": [48, 48, 12]}, "mode": "float64",
                        "train": {"weights": {"lambda_seg": 0.5}}})
    again = build_config(config_to_dict(cfg))
    assert again == cfg
