"""Command line front end.

Subcommands cover the full pipeline on synthetic scenes:

    gen       render a dataset to image files plus the ground-truth grid
    fit       optimize the field and write a checkpoint
    render    novel-view inference from a checkpoint
    voxelize  discretize the field to a semantic voxel grid
    eval      score a predicted grid against ground truth
    gradcheck finite-difference audit of every op and loss term
    report    turn experiment result JSON into tables

Every command takes --config (JSON run config) and repeatable --set
dotted-path overrides; --out overrides the configured output directory.
Failures print a one-line JSON object {"error": ..., "message": ...} to
stderr and exit nonzero, so callers can script against the tool.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, GRID_FORMAT_VERSION, __version__
from . import autodiff as ad
from . import imgio
from . import sscgrid as sg
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, config_to_dict, load_config
from .field import SemanticFieldModel
from .render import RenderConfig, render_image
from .scenesim import Dataset
from .train import fit

CAMERAS = ("front_left", "front_right", "side_left", "side_right")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, cfg, names, extra=None):
    """manifest.json: config plus sha256 per output file; deterministic bytes."""
    manifest = {
        "tool_version": __version__,
        "config": config_to_dict(cfg),
        "files": {n: _sha256(os.path.join(out_dir, n)) for n in sorted(names)},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(cfg, args):
    out = args.out if args.out else cfg.io.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _load_model(cfg, ckpt_path):
    model = SemanticFieldModel(cfg.field, seed=cfg.train.seed)
    state = load_checkpoint(ckpt_path, dtype=cfg.train.np_dtype)
    model.load_state_arrays({k: v for k, v in state.items() if k in model.params})
    return model


def _input_frame(ds, args):
    if args.input_t < 0 or args.input_t >= ds.num_steps:
        raise ValueError(f"--input-t {args.input_t} outside trajectory [0, {ds.num_steps})")
    return ds.frame(args.input_t, args.input_cam)


def _depth_mm(depth):
    # 16-bit millimeters; 0 stays "no hit"
    return np.clip(depth * 1000.0, 0, 65535).round().astype(np.uint16)


# -- commands ---------------------------------------------------------------


def cmd_gen(cfg, args):
    out = _out_dir(cfg, args)
    ds = Dataset(cfg.scene)
    names = []
    for t in range(ds.num_steps):
        for cam in CAMERAS:
            f = ds.frame(t, cam)
            stem = f"t{t:04d}_{cam}"
            names.append(imgio.write_ppm(os.path.join(out, stem + ".ppm"), f.image))
            names.append(imgio.write_pgm(os.path.join(out, stem + "_seg.pgm"),
                                         f.seg.astype(np.uint8)))
            names.append(imgio.write_pgm(os.path.join(out, stem + "_gtseg.pgm"),
                                         f.gt_seg.astype(np.uint8)))
            names.append(imgio.write_pgm(os.path.join(out, stem + "_depth.pgm"),
                                         _depth_mm(f.gt_depth)))
    gt = sg.grid_from_world(ds.world)
    names.append(sg.write_grid(os.path.join(out, "gt.s4cg"), gt))
    scene_meta = {
        "config": config_to_dict(cfg)["scene"],
        "class_table": [list(row) for row in ds.world.class_table],
        "num_frames": ds.num_steps * len(CAMERAS),
        "trajectory": [[list(p.R.reshape(-1)), list(p.t)] for p in ds.poses],
    }
    scene_path = os.path.join(out, "scene.json")
    with open(scene_path, "w") as fh:
        json.dump(scene_meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    names.append(scene_path)
    _write_manifest(out, cfg, [os.path.basename(n) for n in names])
    print(f"wrote {len(names)} files to {out}")


def cmd_fit(cfg, args):
    out = _out_dir(cfg, args)
    ds = Dataset(cfg.scene)
    ckpt, csv_path = fit(ds, cfg.field, cfg.train, cfg.render, cfg.weights, out,
                         resume_from=args.resume)
    _write_manifest(out, cfg, [os.path.basename(ckpt), os.path.basename(csv_path)])
    print(f"checkpoint: {ckpt}")
    print(f"losses:     {csv_path}")


def cmd_render(cfg, args):
    out = _out_dir(cfg, args)
    ds = Dataset(cfg.scene)
    if args.t < 0 or args.t >= ds.num_steps:
        raise ValueError(f"--t {args.t} outside trajectory [0, {ds.num_steps})")
    with ad.default_dtype(cfg.train.np_dtype):
        model = _load_model(cfg, args.checkpoint)
        inp = _input_frame(ds, args)
        fmap = model.encode(ad.constant(inp.image.astype(cfg.train.np_dtype)))
        tgt_cam = ds.rig.camera(args.cam)
        tgt_pose = ds.rig.world_pose(ds.poses[args.t], args.cam)
        res = render_image(model, fmap, inp.intrinsics, inp.pose,
                           tgt_cam.intrinsics, tgt_pose, cfg.render,
                           sources=[(inp.image, inp.intrinsics, inp.pose)])
    names = [
        imgio.write_ppm(os.path.join(out, "color.ppm"), res["color"]),
        imgio.write_pgm(os.path.join(out, "seg.pgm"), res["classes"].astype(np.uint8)),
        imgio.write_pgm(os.path.join(out, "depth.pgm"), _depth_mm(res["depth"])),
    ]
    _write_manifest(out, cfg, [os.path.basename(n) for n in names],
                    extra={"target": {"cam": args.cam, "t": args.t}})
    print(f"rendered {args.cam} t={args.t} to {out}")


def cmd_voxelize(cfg, args):
    out = _out_dir(cfg, args)
    ds = Dataset(cfg.scene)
    spec = sg.VoxelGrid(
        dims=cfg.scene.dims, voxel_size=cfg.scene.voxel_size, origin=np.zeros(3),
        labels=np.zeros(cfg.scene.dims, np.int64),
        invalid=np.zeros(cfg.scene.dims, bool), num_classes=cfg.scene.num_classes,
    )
    with ad.default_dtype(cfg.train.np_dtype):
        model = _load_model(cfg, args.checkpoint)
        inp = _input_frame(ds, args)
        fmap = model.encode(ad.constant(inp.image.astype(cfg.train.np_dtype)))
        pred = sg.voxelize_field(model, fmap, inp.intrinsics, inp.pose, spec,
                                 n_sub=cfg.voxelize.n_sub, tau=cfg.voxelize.tau,
                                 neighborhood=cfg.voxelize.neighborhood)
    names = [
        sg.write_grid(os.path.join(out, "pred.s4cg"), pred),
        sg.export_ply(os.path.join(out, "pred.ply"), pred),
    ]
    occ = int(pred.occupied.sum())
    _write_manifest(out, cfg, [os.path.basename(n) for n in names],
                    extra={"occupied_voxels": occ})
    print(f"voxelized {occ} occupied voxels to {out}")


def cmd_eval(cfg, args):
    out = _out_dir(cfg, args)
    pred = sg.read_grid(args.pred)
    gt = sg.refine_invalids(sg.read_grid(args.gt), street_z=cfg.eval.street_z)
    report = sg.evaluate(pred, gt, [sg.EvalRange(r) for r in cfg.eval_ranges()])
    head = f"{'range (m)':>18s} {'IoU':>7s} {'Prec':>7s} {'Rec':>7s} {'mIoU':>7s}"
    print(head)
    print("-" * len(head))
    for rr in report.results:
        ext = "x".join(f"{v:g}" for v in rr.extent)
        print(f"{ext:>18s} {rr.iou:7.4f} {rr.precision:7.4f} {rr.recall:7.4f} {rr.miou:7.4f}")
    csv_path = os.path.join(out, "eval.csv")
    report.write_csv(csv_path)
    _write_manifest(out, cfg, ["eval.csv"])
    print(f"wrote {csv_path}")


def _loss_gradcheck():
    """Per-term finite-difference audit on a 2x2 patch program, float64."""
    from .camera import Pose, intrinsics_from_fov
    from .losses import (LossWeights, eas_loss, photometric_loss, semantic_loss,
                         total_loss)
    from .field import FieldConfig
    from .render import render_patch

    cfg = FieldConfig(image_width=32, image_height=24, num_classes=6, z_near=0.5, z_far=10.0)
    model = SemanticFieldModel(cfg, seed=0)
    rng = np.random.default_rng(9)
    model.params["fmap"].data[:] = rng.normal(0, 0.5, model.params["fmap"].shape)
    intr = intrinsics_from_fov(70.0, 32, 24)
    pose = Pose.identity()
    rcfg = RenderConfig(num_samples=4, d_near=0.5, d_far=8.0)
    img = rng.uniform(0, 1, (24, 32, 3))
    labels = rng.integers(0, 6, 4)
    tgt = rng.uniform(0, 1, (2, 2, 3))
    valid = np.ones((2, 2), dtype=bool)

    def render():
        fmap = model.encode()
        return render_patch(model, fmap, intr, pose, intr, pose, (14, 10, 2, 2), rcfg,
                            sources=[(img, intr, pose)])

    def f_sem():
        return semantic_loss(render().probs, labels)

    def f_ph():
        res = render()
        rec = ad.reshape(res.colors[0], (2, 2, 3))
        return photometric_loss(ad.constant(tgt), [(rec, valid)])

    def f_eas():
        res = render()
        return eas_loss(ad.reshape(res.depth, (2, 2)), tgt)

    def f_total():
        res = render()
        rec = ad.reshape(res.colors[0], (2, 2, 3))
        return total_loss(
            semantic_loss(res.probs, labels),
            photometric_loss(ad.constant(tgt), [(rec, valid)]),
            eas_loss(ad.reshape(res.depth, (2, 2)), tgt),
            weights=LossWeights(),
        )

    params = {"fmap": model.params["fmap"], "phi_D.w0": model.params["phi_D.w0"],
              "phi_S.w2": model.params["phi_S.w2"]}
    entries = []
    for name, fn in (("semantic", f_sem), ("photometric", f_ph),
                     ("edge_aware_smoothness", f_eas), ("composite", f_total)):
        rep = ad.grad_check(fn, params, h=1e-6, tol=1e-3, max_entries=25)
        worst = max((e.max_rel_err for e in rep.entries), default=0.0)
        entries.append(ad.CheckEntry(name, worst, rep.passed))
    return ad.CheckReport(entries, 1e-3)


def cmd_gradcheck(cfg, args):
    with ad.default_dtype(np.float64):
        ops = ad.check_registered_ops()
        print("op registry:")
        print(str(ops))
        losses = _loss_gradcheck()
        print("\nloss terms (2x2 patches, 4 samples/ray):")
        print(str(losses))
    if not (ops.passed and losses.passed):
        raise SystemExit(1)


def cmd_report(cfg, args):
    from . import experiments

    out = _out_dir(cfg, args)
    names = experiments.write_report(out, ablation=args.ablation,
                                     label_quality=args.label_quality)
    for n in names:
        print(f"wrote {os.path.join(out, n)}")


# -- argument plumbing ------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="semfield",
        description="self-supervised semantic scene completion on synthetic scenes",
    )
    p.add_argument("--version", action="version",
                   version=(f"semfield {__version__} "
                            f"(checkpoint format v{CHECKPOINT_FORMAT_VERSION}, "
                            f"grid format v{GRID_FORMAT_VERSION})"))
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, input_frame=False, checkpoint=False):
        sp.add_argument("--config", default=None, help="run config JSON")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config value, e.g. train.lr=0.0003")
        sp.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint .s4cp path")
        if input_frame:
            sp.add_argument("--input-t", type=int, default=0,
                            help="conditioning frame timestep (default 0)")
            sp.add_argument("--input-cam", default="front_left", choices=CAMERAS,
                            help="conditioning camera (default front_left)")

    common(sub.add_parser("gen", help="write the dataset images and ground-truth grid"))

    sp = sub.add_parser("fit", help="optimize the field")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")

    sp = sub.add_parser("render", help="render a view from a checkpoint")
    common(sp, input_frame=True, checkpoint=True)
    sp.add_argument("--cam", default="front_left", choices=CAMERAS)
    sp.add_argument("--t", type=int, default=0, help="target trajectory timestep")

    sp = sub.add_parser("voxelize", help="discretize the field to a grid")
    common(sp, input_frame=True, checkpoint=True)

    sp = sub.add_parser("eval", help="score a predicted grid")
    common(sp)
    sp.add_argument("--pred", required=True, help="predicted .s4cg")
    sp.add_argument("--gt", required=True, help="ground-truth .s4cg")

    common(sub.add_parser("gradcheck", help="finite-difference audit"))

    sp = sub.add_parser("report", help="render experiment JSON to tables")
    common(sp)
    sp.add_argument("--ablation", default=None, help="ablation results JSON")
    sp.add_argument("--label-quality", default=None, help="label-quality results JSON")

    return p


_COMMANDS = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "render": cmd_render,
    "voxelize": cmd_voxelize,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        _COMMANDS[args.command](cfg, args)
    except SystemExit:
        raise
    except (ConfigError, CheckpointError, sg.GridFormatError, imgio.ImageFormatError,
            ValueError, OSError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
