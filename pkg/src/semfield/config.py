"""Run configuration: strict JSON with dotted-path overrides.

A run config is a JSON object with optional sections

    scene, rig, field, train, render, voxelize, eval, io

plus a top-level "mode" ("float32" or "float64") that selects the training
dtype.  Every key inside a section must name a field of the matching config
dataclass; unknown keys are rejected rather than silently ignored.  The
"rig" section is a convenience alias for the camera-related scene fields
(image size, fovs, baseline, camera height).  The conditioning encoder's
resolution and class count always follow the scene unless the field section
pins them explicitly.

Overrides are strings like "train.lr=0.0003" or "scene.dims=[48,48,12]";
values are parsed as JSON with a bare-string fallback, and apply to the raw
dict before validation so they obey the same strictness rules.
"""

from __future__ import annotations

import dataclasses
import json

from .field import FieldConfig
from .losses import LossWeights
from .render import RenderConfig
from .scenesim import NoiseConfig, SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class VoxelizeConfig:
    n_sub: int = 8
    tau: float | None = None  # None: ln 2 / voxel_size
    neighborhood: bool = True


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    # each range is an (x_max, y_max, z_max) extent in meters from the
    # grid origin; None derives quarter/half/full analogs from the scene
    ranges: tuple | None = None
    street_z: int = 7


@dataclasses.dataclass(frozen=True)
class IOConfig:
    out_dir: str = "out"


# rig keys live on SceneConfig; listed here so the alias section can be strict
_RIG_KEYS = ("image_width", "image_height", "front_fov", "side_fov",
             "baseline", "camera_height")

_SECTIONS = ("scene", "rig", "field", "train", "render", "voxelize",
             "eval", "io", "mode")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig
    field: FieldConfig
    train: TrainConfig
    render: RenderConfig
    weights: LossWeights
    voxelize: VoxelizeConfig
    eval: EvalConfig
    io: IOConfig

    def eval_ranges(self):
        """Evaluation extents: explicit ones, else quarter/half/full analogs.

        The defaults crop the driving direction (x) only, the way road SSC
        benchmarks report 12.8/25.6/51.2 m forward slabs at full width.
        """
        if self.eval.ranges is not None:
            return [tuple(r) for r in self.eval.ranges]
        ex = self.scene.dims[0] * self.scene.voxel_size
        ey = self.scene.dims[1] * self.scene.voxel_size
        ez = self.scene.dims[2] * self.scene.voxel_size
        return [(ex / 4, ey, ez), (ex / 2, ey, ez), (ex, ey, ez)]


def _build(cls, section, data):
    """Construct dataclass cls from a dict, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        default = fields[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"section {section!r}: {err}") from err


def _set_path(raw, path, value):
    keys = path.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} crosses a non-section")
    node[keys[-1]] = value


def apply_overrides(raw, overrides):
    """Apply "a.b.c=json_value" strings to a raw config dict, in order."""
    for item in overrides:
        path, sep, text = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text  # bare strings like full or per_image
        _set_path(raw, path.strip(), value)
    return raw


def build_config(raw):
    """Validate a raw dict into a RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section {key!r}")

    scene_raw = dict(raw.get("scene", {}))
    noise_raw = scene_raw.pop("noise", None)
    for key, value in raw.get("rig", {}).items():
        if key not in _RIG_KEYS:
            raise ConfigError(f"unknown key {key!r} in section 'rig'")
        scene_raw.setdefault(key, value)
    if noise_raw is not None:
        scene_raw["noise"] = _build(NoiseConfig, "scene.noise", noise_raw)
    scene = _build(SceneConfig, "scene", scene_raw)

    field_raw = dict(raw.get("field", {}))
    # the encoder sees the scene's images; keep its geometry in sync
    field_raw.setdefault("image_width", scene.image_width)
    field_raw.setdefault("image_height", scene.image_height)
    field_raw.setdefault("num_classes", scene.num_classes)
    field = _build(FieldConfig, "field", field_raw)

    train_raw = dict(raw.get("train", {}))
    weights_raw = train_raw.pop("weights", {})
    mode = raw.get("mode")
    if mode is not None:
        if mode not in ("float32", "float64"):
            raise ConfigError(f"mode must be float32 or float64, got {mode!r}")
        if "dtype" in train_raw and train_raw["dtype"] != mode:
            raise ConfigError("mode and train.dtype disagree")
        train_raw["dtype"] = mode
    train = _build(TrainConfig, "train", train_raw)
    weights = _build(LossWeights, "train.weights", weights_raw)

    render = _build(RenderConfig, "render", raw.get("render", {}))
    voxelize = _build(VoxelizeConfig, "voxelize", raw.get("voxelize", {}))

    eval_raw = dict(raw.get("eval", {}))
    if "ranges" in eval_raw and eval_raw["ranges"] is not None:
        ranges = []
        for r in eval_raw["ranges"]:
            if len(r) != 3:
                raise ConfigError(f"eval range {r!r} needs three extents")
            ranges.append(tuple(float(v) for v in r))
        eval_raw["ranges"] = tuple(ranges)
    eval_cfg = _build(EvalConfig, "eval", eval_raw)

    io_cfg = _build(IOConfig, "io", raw.get("io", {}))
    return RunConfig(scene=scene, field=field, train=train, render=render,
                     weights=weights, voxelize=voxelize, eval=eval_cfg,
                     io=io_cfg)


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: {err}") from err
    apply_overrides(raw, overrides)
    return build_config(raw)


def default_config():
    return build_config({})


def config_to_dict(cfg):
    """Round-trippable plain-dict form, used for manifests."""
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            obj = dataclasses.asdict(obj)
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (tuple, list)):
            return [plain(v) for v in obj]
        return obj

    return {
        "scene": plain(cfg.scene),
        "field": plain(cfg.field),
        "train": {**plain(cfg.train), "weights": plain(cfg.weights)},
        "render": plain(cfg.render),
        "voxelize": plain(cfg.voxelize),
        "eval": plain(cfg.eval),
        "io": plain(cfg.io),
    }
