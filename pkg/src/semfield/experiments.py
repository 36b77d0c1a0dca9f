"""Desk-scale relation experiments: loss ablations and label-quality trends.

Rather than chasing absolute benchmark numbers, these suites reproduce the
*relations* the method is known for: occupancy improves when both losses are
on, random side offsets beat a fixed one at far range, and rendered
segmentation at future poses degrades gracefully while beating the noisy
labels it was trained on.  Each (variant, seed) run is self-contained and its
result dict is mergeable, so runs could execute as independent processes; on
a single-core box they simply run in sequence.

Five directional assertions, evaluated on medians over the seeds:

    1. full > semantic-only occupancy IoU at every range
    2. full >= photometric-only occupancy IoU at every range
    3. random offsets >= fixed offset at the far range
    4. more labeled views -> higher future-view segmentation accuracy
       (full >= front-only >= input-only at the +15 offset)
    5. full at +0 >= the pseudo-label accuracy it trained on
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os

import numpy as np

from . import autodiff as ad
from . import sscgrid as sg
from .checkpoint import load_checkpoint
from .config import build_config
from .field import SemanticFieldModel
from .render import render_image
from .scenesim import Dataset
from .train import fit

ABLATION_VARIANTS = ("full", "semantic_only", "photometric_only", "fixed_offset")
LABELQ_VARIANTS = ("full", "front_only", "input_only")
OFFSETS = (0, 5, 10, 15)


def small_scale_raw(steps=250):
    """Raw run-config dict for the desk-scale suite world.

    The camera rides low (1.0 m) with a square image so the visible floor
    starts inside the quarter-range slab; a level camera at car height
    cannot see the nearest meters of road at all, which would zero the
    near-range IoU for every variant and void the comparisons.
    """
    return {
        "scene": {"dims": [48, 32, 12], "num_steps": 16, "speed": 1.2,
                  "camera_height": 0.8},
        "rig": {"image_width": 32, "image_height": 32, "front_fov": 90.0},
        "train": {
            "steps": steps,
            "lr": 1e-3,
            "side_offset_range": [4, 15],
            "forward_offset": 3,
            "patches_per_image": 4,
            "patch_size": 8,
            "checkpoint_every": 10 ** 9,
        },
        "render": {"num_samples": 8, "stochastic": True},
    }


def _variant_raw(base_raw, variant):
    raw = json.loads(json.dumps(base_raw))  # deep copy
    tr = raw.setdefault("train", {})
    if variant == "semantic_only":
        tr["use_photometric"] = False
    elif variant == "photometric_only":
        tr["use_semantic"] = False
    elif variant == "fixed_offset":
        tr["fixed_side_offset"] = tr.get("side_offset_range", [10, 40])[0]
    elif variant == "front_only":
        tr["sem_frame_mode"] = "front_only"
    elif variant == "input_only":
        tr["sem_frame_mode"] = "input_only"
    elif variant != "full":
        raise ValueError(f"unknown variant {variant!r}")
    return raw


def _fit_variant(base_raw, variant, seed, work_dir):
    """Train one (variant, seed) run and return (model, dataset, cfg)."""
    raw = _variant_raw(base_raw, variant)
    raw.setdefault("scene", {})["seed"] = seed
    raw.setdefault("train", {})["seed"] = seed
    cfg = build_config(raw)
    out = os.path.join(work_dir, f"{variant}_s{seed}")
    ds = Dataset(cfg.scene)
    ckpt, _ = fit(ds, cfg.field, cfg.train, cfg.render, cfg.weights, out)
    with ad.default_dtype(cfg.train.np_dtype):
        model = SemanticFieldModel(cfg.field, seed=cfg.train.seed)
        state = load_checkpoint(ckpt, dtype=cfg.train.np_dtype)
        model.load_state_arrays({k: v for k, v in state.items() if k in model.params})
    return model, ds, cfg


def _grid_metrics(model, ds, cfg):
    """Occupancy IoU (and mIoU) of the voxelized field at the three ranges."""
    inp = ds.frame(0, "front_left")
    gt = sg.refine_invalids(sg.grid_from_world(ds.world), street_z=cfg.eval.street_z)
    spec = sg.VoxelGrid(
        dims=cfg.scene.dims, voxel_size=cfg.scene.voxel_size, origin=np.zeros(3),
        labels=np.zeros(cfg.scene.dims, np.int64),
        invalid=np.zeros(cfg.scene.dims, bool), num_classes=cfg.scene.num_classes,
    )
    with ad.default_dtype(cfg.train.np_dtype):
        fmap = model.encode(ad.constant(inp.image.astype(cfg.train.np_dtype)))
        pred = sg.voxelize_field(model, fmap, inp.intrinsics, inp.pose, spec,
                                 n_sub=cfg.voxelize.n_sub, tau=cfg.voxelize.tau,
                                 neighborhood=cfg.voxelize.neighborhood)
    ranges = cfg.eval_ranges()
    report = sg.evaluate(pred, gt, [sg.EvalRange(r) for r in ranges])
    return {
        "ranges": [list(r) for r in ranges],
        "iou": [rr.iou for rr in report.results],
        "miou": [rr.miou for rr in report.results],
        "precision": [rr.precision for rr in report.results],
        "recall": [rr.recall for rr in report.results],
    }


def _seg_accuracy(model, ds, cfg):
    """Rendered front-camera segmentation accuracy vs clean labels per offset."""
    inp = ds.frame(0, "front_left")
    # evaluate with deterministic midpoints, dense enough that ray sampling
    # does not throttle the comparison against the pseudo labels
    rcfg = dataclasses.replace(cfg.render, stochastic=False,
                               num_samples=max(32, cfg.render.num_samples))
    accs = []
    with ad.default_dtype(cfg.train.np_dtype):
        fmap = model.encode(ad.constant(inp.image.astype(cfg.train.np_dtype)))
        for off in OFFSETS:
            tgt = ds.frame(off, "front_left")
            res = render_image(model, fmap, inp.intrinsics, inp.pose,
                               tgt.intrinsics, tgt.pose, rcfg)
            accs.append(float((res["classes"] == tgt.gt_seg).mean()))
    return accs


def pseudo_label_accuracy(ds, timesteps=OFFSETS):
    """Fraction of corrupted label pixels matching clean GT, pooled over frames."""
    match = total = 0
    for t in timesteps:
        for cam in ("front_left", "front_right", "side_left", "side_right"):
            f = ds.frame(t, cam)
            match += int((f.seg == f.gt_seg).sum())
            total += f.seg.size
    return match / total


def _median(rows):
    return [float(np.median(col)) for col in np.asarray(rows, dtype=float).T]


def run_ablation(work_dir, seeds=(0, 1, 2), steps=250, base_raw=None, fits=None):
    """Table-2 analog: occupancy IoU per variant at quarter/half/full ranges.

    fits, when given, is a cache dict {(variant, seed): (model, ds, cfg)}
    shared with the label-quality suite so the "full" runs train once.
    """
    base_raw = base_raw if base_raw is not None else small_scale_raw(steps)
    fits = fits if fits is not None else {}
    runs = []
    for variant in ABLATION_VARIANTS:
        for seed in seeds:
            key = (variant, seed)
            if key not in fits:
                fits[key] = _fit_variant(base_raw, variant, seed, work_dir)
            model, ds, cfg = fits[key]
            m = _grid_metrics(model, ds, cfg)
            runs.append({"variant": variant, "seed": seed, **m})

    def med(variant, field):
        return _median([r[field] for r in runs if r["variant"] == variant])

    medians = {v: {"iou": med(v, "iou"), "miou": med(v, "miou")}
               for v in ABLATION_VARIANTS}
    full, sem = medians["full"]["iou"], medians["semantic_only"]["iou"]
    photo, fixed = medians["photometric_only"]["iou"], medians["fixed_offset"]["iou"]
    assertions = {
        "full_gt_semantic_only_all_ranges": all(f > s for f, s in zip(full, sem)),
        "full_ge_photometric_only_all_ranges": all(f >= p for f, p in zip(full, photo)),
        "random_ge_fixed_offset_far_range": full[-1] >= fixed[-1],
    }
    return {"seeds": list(seeds), "ranges": runs[0]["ranges"], "runs": runs,
            "medians": medians, "assertions": assertions}


def run_label_quality(work_dir, seeds=(0, 1, 2), steps=250, base_raw=None, fits=None):
    """Table-3 analog: rendered segmentation accuracy at future offsets."""
    base_raw = base_raw if base_raw is not None else small_scale_raw(steps)
    fits = fits if fits is not None else {}
    runs = []
    pseudo = []
    for variant in LABELQ_VARIANTS:
        for seed in seeds:
            key = (variant, seed)
            if key not in fits:
                fits[key] = _fit_variant(base_raw, variant, seed, work_dir)
            model, ds, cfg = fits[key]
            runs.append({"variant": variant, "seed": seed,
                         "accuracy": _seg_accuracy(model, ds, cfg)})
            if variant == "full":
                pseudo.append(pseudo_label_accuracy(ds))

    def med(variant):
        return _median([r["accuracy"] for r in runs if r["variant"] == variant])

    medians = {v: med(v) for v in LABELQ_VARIANTS}
    pseudo_acc = float(np.median(pseudo))
    far = {v: medians[v][-1] for v in LABELQ_VARIANTS}
    assertions = {
        "more_labeled_views_better_at_far_offset":
            far["full"] >= far["front_only"] >= far["input_only"],
        "accuracy_non_increasing_with_offset":
            all(all(a[i] >= a[i + 1] for i in range(len(a) - 1))
                for a in medians.values()),
        "full_plus0_ge_pseudo_label_accuracy": medians["full"][0] >= pseudo_acc,
    }
    return {"seeds": list(seeds), "offsets": list(OFFSETS), "runs": runs,
            "medians": medians, "pseudo_label_accuracy": pseudo_acc,
            "assertions": assertions}


def run_experiments(work_dir, seeds=(0, 1, 2), steps=250, base_raw=None):
    """Both suites with the "full" fits shared; writes experiments.json."""
    base_raw = base_raw if base_raw is not None else small_scale_raw(steps)
    fits = {}
    ablation = run_ablation(work_dir, seeds, steps, base_raw, fits)
    labelq = run_label_quality(work_dir, seeds, steps, base_raw, fits)
    result = {"base_config": base_raw, "ablation": ablation,
              "label_quality": labelq,
              "assertions": {**ablation["assertions"], **labelq["assertions"]}}
    path = os.path.join(work_dir, "experiments.json")
    with open(path, "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return result


# -- reporting --------------------------------------------------------------


def _fmt_range(r):
    return "x".join(f"{v:g}" for v in r)


def _ablation_tables(data, out_dir):
    ranges = [_fmt_range(r) for r in data["ranges"]]
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"iou_{r}" for r in ranges]
                   + [f"miou_{r}" for r in ranges])
        for v in ABLATION_VARIANTS:
            m = data["medians"][v]
            w.writerow([v] + [f"{x:.6f}" for x in m["iou"] + m["miou"]])
    lines = ["## Loss and offset ablation (occupancy IoU, median over seeds)", ""]
    lines.append("| variant | " + " | ".join(f"IoU {r}" for r in ranges) + " |")
    lines.append("|---" * (1 + len(ranges)) + "|")
    for v in ABLATION_VARIANTS:
        m = data["medians"][v]["iou"]
        lines.append(f"| {v} | " + " | ".join(f"{x:.4f}" for x in m) + " |")
    lines.append("")
    for name, ok in data["assertions"].items():
        lines.append(f"- {'PASS' if ok else 'FAIL'}: {name}")
    return lines


def _labelq_tables(data, out_dir):
    offs = data["offsets"]
    with open(os.path.join(out_dir, "label_quality.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"acc_plus{o}" for o in offs])
        for v in LABELQ_VARIANTS:
            w.writerow([v] + [f"{x:.6f}" for x in data["medians"][v]])
        w.writerow(["pseudo_labels", f"{data['pseudo_label_accuracy']:.6f}"]
                   + [""] * (len(offs) - 1))
    lines = ["## Future-view segmentation accuracy (median over seeds)", ""]
    lines.append("| labeled views | " + " | ".join(f"+{o}" for o in offs) + " |")
    lines.append("|---" * (1 + len(offs)) + "|")
    for v in LABELQ_VARIANTS:
        lines.append(f"| {v} | " + " | ".join(f"{x:.4f}" for x in data["medians"][v]) + " |")
    lines.append("")
    lines.append(f"pseudo-label accuracy during training: "
                 f"{data['pseudo_label_accuracy']:.4f}")
    lines.append("")
    for name, ok in data["assertions"].items():
        lines.append(f"- {'PASS' if ok else 'FAIL'}: {name}")
    return lines


def write_report(out_dir, ablation=None, label_quality=None):
    """Render experiment JSON (either suite or a combined file) to tables."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    lines = ["# Experiment report", ""]

    def load(path):
        with open(path) as fh:
            return json.load(fh)

    if ablation:
        data = load(ablation)
        data = data.get("ablation", data)
        lines += _ablation_tables(data, out_dir) + [""]
        names.append("ablation.csv")
    if label_quality:
        data = load(label_quality)
        data = data.get("label_quality", data)
        lines += _labelq_tables(data, out_dir) + [""]
        names.append("label_quality.csv")
    if not names:
        raise ValueError("nothing to report: pass ablation and/or label_quality JSON")
    with open(os.path.join(out_dir, "report.md"), "w") as fh:
        fh.write("\n".join(lines))
    names.append("report.md")
    return names
