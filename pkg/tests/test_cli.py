import json
import os
import subprocess
import sys

import numpy as np
import pytest

from semfield import cli, imgio
from semfield import sscgrid as sg

# one tiny world shared by the pipeline tests; deep enough for the camera
SCENE = ["--set", "scene.dims=[32,32,12]", "--set", "scene.num_steps=4",
         "--set", "scene.speed=1.0", "--set", "rig.image_width=24",
         "--set", "rig.image_height=16"]
FIT = ["--set", "train.steps=2", "--set", "train.patches_per_image=2",
       "--set", "train.patch_size=4", "--set", "train.side_offset_range=[2,3]",
       "--set", "train.forward_offset=1", "--set", "render.num_samples=4"]


def run(argv):
    return cli.main(argv)


def test_version_subprocess():
    out = subprocess.run([sys.executable, "-m", "semfield.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "semfield" in out.stdout and "grid format" in out.stdout


def test_gen_writes_frames_grid_and_manifest(tmp_path, capsys):
    out = tmp_path / "g"
    assert run(["gen", *SCENE, "--set", "scene.num_steps=1", "--out", str(out)]) == 0
    files = sorted(os.listdir(out))
    # one timestep: 4 cameras x 4 maps, plus grid, scene meta, manifest
    assert len([f for f in files if f.endswith(".ppm")]) == 4
    assert len([f for f in files if f.endswith(".pgm")]) == 12
    assert {"gt.s4cg", "scene.json", "manifest.json"} <= set(files)

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["scene"]["dims"] == [32, 32, 12]
    assert len(manifest["files"]) == 18
    # hashes actually describe the files
    import hashlib
    name, digest = next(iter(sorted(manifest["files"].items())))
    assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest

    grid = sg.read_grid(out / "gt.s4cg")
    assert grid.dims == (32, 32, 12)
    seg = imgio.read_pgm(out / "t0000_front_left_seg.pgm")
    assert seg.shape == (16, 24)
    depth = imgio.read_pgm(out / "t0000_front_left_depth.pgm")
    assert depth.dtype == np.uint16


def test_gen_manifest_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen", *SCENE, "--out", str(a)]) == 0
    assert run(["gen", *SCENE, "--out", str(b)]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert cli.main(["fit", *SCENE, *FIT, "--out", str(out)]) == 0
    return out


def test_fit_outputs(fitted):
    assert (fitted / "checkpoint.s4cp").exists()
    assert (fitted / "loss.csv").exists()
    manifest = json.loads((fitted / "manifest.json").read_text())
    assert set(manifest["files"]) == {"checkpoint.s4cp", "loss.csv"}


def test_render_from_checkpoint(fitted, tmp_path):
    out = tmp_path / "r"
    assert run(["render", *SCENE, *FIT, "--checkpoint", str(fitted / "checkpoint.s4cp"),
                "--cam", "front_right", "--t", "3", "--out", str(out)]) == 0
    color = imgio.read_ppm(out / "color.ppm")
    seg = imgio.read_pgm(out / "seg.pgm")
    depth = imgio.read_pgm(out / "depth.pgm")
    assert color.shape == (16, 24, 3) and seg.shape == (16, 24)
    assert depth.dtype == np.uint16
    meta = json.loads((out / "manifest.json").read_text())
    assert meta["target"] == {"cam": "front_right", "t": 3}


def test_render_rejects_bad_timestep(fitted, tmp_path):
    rc = run(["render", *SCENE, *FIT, "--checkpoint", str(fitted / "checkpoint.s4cp"),
              "--t", "99", "--out", str(tmp_path / "r")])
    assert rc == 1


def test_voxelize_and_eval(fitted, tmp_path, capsys):
    gen_dir, vox_dir, eval_dir = tmp_path / "g", tmp_path / "v", tmp_path / "e"
    assert run(["gen", *SCENE, "--out", str(gen_dir)]) == 0
    assert run(["voxelize", *SCENE, *FIT, "--checkpoint", str(fitted / "checkpoint.s4cp"),
                "--out", str(vox_dir)]) == 0
    pred = sg.read_grid(vox_dir / "pred.s4cg")
    assert pred.dims == (32, 32, 12)
    assert (vox_dir / "pred.ply").exists()

    assert run(["eval", *SCENE, "--pred", str(vox_dir / "pred.s4cg"),
                "--gt", str(gen_dir / "gt.s4cg"), "--out", str(eval_dir)]) == 0
    txt = capsys.readouterr().out
    assert "IoU" in txt
    rows = (eval_dir / "eval.csv").read_text().strip().splitlines()
    assert len(rows) == 4  # header + three ranges


def test_eval_perfect_prediction_scores_one(tmp_path, capsys):
    gen_dir, eval_dir = tmp_path / "g", tmp_path / "e"
    assert run(["gen", *SCENE, "--out", str(gen_dir)]) == 0
    assert run(["eval", *SCENE, "--pred", str(gen_dir / "gt.s4cg"),
                "--gt", str(gen_dir / "gt.s4cg"), "--out", str(eval_dir)]) == 0
    rows = (eval_dir / "eval.csv").read_text().strip().splitlines()[1:]
    for row in rows:
        _, _, _, iou, prec, rec, miou = row.split(",")[:7]
        assert float(iou) == 1.0 and float(prec) == 1.0
        assert float(rec) == 1.0 and float(miou) == 1.0


def test_errors_are_machine_readable(tmp_path, capsys):
    rc = run(["eval", *SCENE, "--pred", "/nonexistent.s4cg",
              "--gt", "/nonexistent.s4cg", "--out", str(tmp_path)])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "error" in err and "message" in err

    rc = run(["gen", "--set", "scene.nope=1", "--out", str(tmp_path)])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"


def test_report_requires_input(tmp_path, capsys):
    rc = run(["report", "--out", str(tmp_path)])
    assert rc == 1
