"""Acceptance gate: one test per release criterion, each printing a PASS/FAIL line.

The lines go to the real stderr so the checklist stays visible under pytest's
capture.  Criteria are ordered cheap-first; the two fit-heavy ones (the
directional experiment suites and the frozen reference regression) run last
and dominate the wall time.  Regression thresholds marked FROZEN were
measured once on the reference machine and must not be edited to make a
failing run pass.
"""

import json
import sys
import time

import numpy as np
import pytest

from semfield import autodiff as ad
from semfield import cli
from semfield import experiments as ex
from semfield import sscgrid as sg
from semfield.camera import project
from semfield.checkpoint import load_checkpoint
from semfield.field import FieldConfig, SemanticFieldModel
from semfield.losses import LossWeights
from semfield.render import RenderConfig, composite, integrate, render_image
from semfield.scenesim import Dataset, SceneConfig
from semfield.train import TrainConfig, fit

pytestmark = pytest.mark.acceptance

# FROZEN 2026-08-22: 90% of the calibration run's full-range scores on the
# reference scene (achieved IoU 0.3337, mIoU 0.1336 in 25.5 min).
T_IOU = 0.3003
T_MIOU = 0.1202

# experiment suites: fits per variant and seed at the small desk scale
EXP_SEEDS = (0, 1, 2)
EXP_STEPS = 300


@pytest.fixture
def report(capsys):
    """Checklist writer; capsys.disabled lifts the fd capture for the line."""

    def _report(num, name, ok, detail=""):
        tag = "PASS" if ok else "FAIL"
        line = f"[criterion {num}] {tag} {name}"
        if detail:
            line += f": {detail}"
        with capsys.disabled():
            sys.stderr.write(line + "\n")
        assert ok, line

    return _report


# -- 1: gradients -----------------------------------------------------------


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    with ad.default_dtype(np.float64):
        rep = cli._loss_gradcheck()
    wall = time.perf_counter() - t0
    worst = max(e.max_rel_err for e in rep.entries)
    ok = rep.passed and wall < 60.0
    report(1, "loss term and composite gradients vs finite differences", ok,
            f"worst rel err {worst:.1e}, tol 1e-3, {wall:.1f}s")


# -- 2: rendering vs the exact ray-cast oracle ------------------------------


class _IndicatorField:
    """sigma = 10/voxel_size inside occupied voxels, one-hot logits."""

    def __init__(self, world, num_classes=6):
        self.world = world
        self.hard = 10.0 / world.voxel_size

        class _Cfg:
            pass

        self.cfg = _Cfg()
        self.cfg.num_classes = num_classes

    def query_batch(self, fmap, intr, pose, xs, logit_rows=None):
        xs = np.asarray(xs).reshape(-1, 3)
        idx = np.floor((xs - self.world.origin) / self.world.voxel_size).astype(int)
        dims = np.array(self.world.labels.shape)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        labels = np.zeros(len(xs), dtype=int)
        labels[inside] = self.world.labels[tuple(idx[inside].T)]
        sigma = np.where(inside & (labels > 0), self.hard, 0.0)
        logits = np.eye(self.cfg.num_classes)[labels] * 20.0
        _, _, in_view = project(intr, pose, xs)
        return ad.constant(sigma), ad.constant(logits), in_view


def test_criterion_2_render_oracle(report):
    t0 = time.perf_counter()
    cfg = SceneConfig(seed=0, dims=(48, 48, 12), num_classes=6, num_steps=4,
                      image_width=64, image_height=48)
    ds = Dataset(cfg)
    model = _IndicatorField(ds.world)
    # depth error is about uniform over one sampling bin, so the bin must sit
    # below the half-voxel tolerance for a high match rate
    rcfg = RenderConfig(num_samples=160, d_near=0.5, d_far=14.0)
    tol = max(0.5 * (rcfg.d_far - rcfg.d_near) / rcfg.num_samples,
              0.5 * ds.world.voxel_size)

    depth_ok, seg_ok, total = 0, 0, 0
    for t, cam in ((0, "front_left"), (0, "front_right"),
                   (2, "front_left"), (2, "front_right")):
        fr = ds.frame(t, cam)
        res = render_image(model, None, fr.intrinsics, fr.pose,
                           fr.intrinsics, fr.pose, rcfg)
        surface = (fr.gt_dist > 0) & (fr.gt_dist < rcfg.d_far)
        depth_ok += (np.abs(res["depth"] - fr.gt_dist)[surface] <= tol).sum()
        seg_ok += (res["classes"] == fr.gt_seg)[surface].sum()
        total += surface.sum()
    wall = time.perf_counter() - t0
    fd, fs = depth_ok / total, seg_ok / total
    ok = fd >= 0.95 and fs >= 0.95 and wall < 120.0
    report(2, "rendered depth and classes vs DDA ground truth", ok,
            f"depth {fd:.1%}, seg {fs:.1%} of {total} surface rays "
            f"within {tol:.2f} m, {wall:.1f}s")


# -- 3: compositing invariants ----------------------------------------------


def test_criterion_3_compositing_invariants(report):
    rng = np.random.default_rng(0)
    n, m = 100_000, 8
    sigma = rng.uniform(0.0, 5.0, (n, m))
    delta = rng.uniform(0.01, 0.5, (n, m))
    w = composite(ad.constant(sigma), delta).data
    residual = np.exp(-(sigma * delta).sum(axis=1))
    dev = np.abs(w.sum(axis=1) + residual - 1.0).max()

    # constructed case: weights (0.9, 0.1) on opposite hard logits must mix
    # the per-sample distributions, not the logits
    w0 = 0.9
    s0 = -np.log(1.0 - w0)
    sig = ad.constant(np.array([[s0, 60.0]]))
    ww = composite(sig, np.ones(2))
    logits = np.array([[[0.0, 10.0], [10.0, 0.0]]])
    probs = integrate(ww, ad.softmax(ad.constant(logits))).data
    # the library path must equal softmax-then-integrate composed by hand
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    manual = (ww.data[..., None] * p).sum(axis=1)
    exact = np.array_equal(probs, manual)
    mixed = np.allclose(probs, [[0.1, 0.9]], atol=1e-3)
    wrong = ad.softmax(integrate(ww, ad.constant(logits))).data
    contrast = wrong[0, 0] < 0.01

    ok = dev <= 1e-6 and exact and mixed and contrast
    report(3, "weight partition and per-sample softmax order", ok,
            f"max |sum w + residual - 1| {dev:.1e} on {n} rays, "
            f"constructed case exact={exact}")


# -- 4: invalid-mask refinement vs brute force ------------------------------


def _make_grid(labels, invalid=None, num_classes=6, vs=0.2):
    labels = np.asarray(labels)
    if invalid is None:
        invalid = np.zeros(labels.shape, dtype=bool)
    return sg.VoxelGrid(dims=labels.shape, voxel_size=vs, origin=np.zeros(3),
                        labels=labels, invalid=np.asarray(invalid, bool),
                        num_classes=num_classes)


def _brute_refine(grid, street_z=7):
    out = grid.copy()
    X, Y, Z = grid.dims
    for x in range(X):
        for y in range(Y):
            for z in range(min(street_z, Z)):
                acc = True
                for i in range(z + 1):
                    acc = acc and bool(grid.invalid[x, y, i] or grid.labels[x, y, i] == 0)
                if acc:
                    out.invalid[x, y, z] = True
    return out


def test_criterion_4_refinement_equivalence(report):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for _ in range(100):
        labels = np.where(rng.random((16, 16, 8)) < 0.3,
                          rng.integers(1, 6, (16, 16, 8)), 0)
        g = _make_grid(labels, rng.random((16, 16, 8)) < 0.2)
        fast = sg.refine_invalids(g)
        assert np.array_equal(fast.invalid, _brute_refine(g).invalid)
        assert np.array_equal(fast.labels, g.labels)
        twice = sg.refine_invalids(fast)
        assert np.array_equal(twice.invalid, fast.invalid)
        newly = fast.invalid & ~g.invalid
        assert not (newly & ~g.invalid & (g.labels > 0)).any()
    wall = time.perf_counter() - t0
    ok = wall < 10.0
    report(4, "column refinement matches brute force on 100 grids", ok,
            f"exact, idempotent, occupied voxels kept, {wall:.1f}s")


# -- 5: hand-computed metric fixtures ---------------------------------------


def test_criterion_5_metric_fixtures(report):
    pred = np.zeros((4, 1, 1), dtype=int)
    gt = np.zeros((4, 1, 1), dtype=int)
    pred[0, 0, 0] = pred[1, 0, 0] = 3
    gt[1, 0, 0] = gt[2, 0, 0] = 3
    r = sg.evaluate(_make_grid(pred, vs=1.0), _make_grid(gt, vs=1.0),
                    [sg.EvalRange((4, 1, 1))]).results[0]
    overlap = (r.iou == pytest.approx(1 / 3) and r.precision == pytest.approx(1 / 2)
               and r.recall == pytest.approx(1 / 2)
               and r.class_iou[2] == pytest.approx(1 / 3)
               and r.miou == pytest.approx(1 / 3))

    gt2 = np.zeros((3, 3, 3), dtype=int)
    gt2[1, 1, 1] = 2
    r2 = sg.evaluate(_make_grid(np.zeros_like(gt2), vs=1.0), _make_grid(gt2, vs=1.0),
                     [sg.EvalRange((3, 3, 3))]).results[0]
    empty = r2.iou == 0.0 and r2.precision == 0.0 and r2.recall == 0.0 and r2.miou == 0.0

    inv = np.zeros((2, 1, 1), dtype=bool)
    inv[0, 0, 0] = True
    p3 = np.zeros((2, 1, 1), dtype=int)
    g3 = np.zeros((2, 1, 1), dtype=int)
    g3[0, 0, 0] = 1
    p3[1, 0, 0] = g3[1, 0, 0] = 1
    r3 = sg.evaluate(_make_grid(p3, vs=1.0), _make_grid(g3, inv, vs=1.0),
                     [sg.EvalRange((2, 1, 1))]).results[0]
    masked = r3.iou == 1.0

    rng = np.random.default_rng(3)
    labels = np.where(rng.random((8, 8, 4)) < 0.3, rng.integers(1, 6, (8, 8, 4)), 0)
    g4 = _make_grid(labels)
    r4 = sg.evaluate(g4, g4, [sg.EvalRange(tuple(g4.extent))]).results[0]
    perfect = r4.iou == 1.0 and r4.miou == 1.0

    ok = overlap and empty and masked and perfect
    report(5, "hand-computed IoU, precision, recall, mIoU fixtures", ok,
            "2-2-1 overlap, empty prediction, invalid masking, identity")


# -- 9: determinism and resume ----------------------------------------------

SCENE9 = ["--set", "scene.dims=[32,32,12]", "--set", "scene.num_steps=4",
          "--set", "scene.speed=1.0", "--set", "rig.image_width=24",
          "--set", "rig.image_height=16", "--set", "mode=float64"]
FIT9 = ["--set", "train.patches_per_image=2", "--set", "train.patch_size=4",
        "--set", "train.side_offset_range=[2,3]", "--set", "train.forward_offset=1",
        "--set", "train.checkpoint_every=3", "--set", "render.num_samples=4"]


def _steps(n):
    return ["--set", f"train.steps={n}"]


def test_criterion_9_determinism_and_resume(tmp_path, report):
    d = {k: tmp_path / k for k in ("g1", "g2", "a1", "a2", "b", "c", "v", "e1", "e2")}
    for args in (["gen", *SCENE9, "--out", str(d["g1"])],
                 ["gen", *SCENE9, "--out", str(d["g2"])],
                 ["fit", *SCENE9, *FIT9, *_steps(6), "--out", str(d["a1"])],
                 ["fit", *SCENE9, *FIT9, *_steps(6), "--out", str(d["a2"])],
                 ["fit", *SCENE9, *FIT9, *_steps(3), "--out", str(d["b"])]):
        assert cli.main(args) == 0
    assert cli.main(["fit", *SCENE9, *FIT9, *_steps(6), "--out", str(d["c"]),
                     "--resume", str(d["b"] / "checkpoint.s4cp")]) == 0
    assert cli.main(["voxelize", *SCENE9, "--checkpoint",
                     str(d["a1"] / "checkpoint.s4cp"), "--out", str(d["v"])]) == 0
    for e in ("e1", "e2"):
        assert cli.main(["eval", *SCENE9, "--pred", str(d["v"] / "pred.s4cg"),
                         "--gt", str(d["g1"] / "gt.s4cg"), "--out", str(d[e])]) == 0

    gen_same = ((d["g1"] / "manifest.json").read_bytes()
                == (d["g2"] / "manifest.json").read_bytes())
    fit_same = ((d["a1"] / "manifest.json").read_bytes()
                == (d["a2"] / "manifest.json").read_bytes())
    eval_same = ((d["e1"] / "manifest.json").read_bytes()
                == (d["e2"] / "manifest.json").read_bytes())

    # the straight run checkpoints at step 3 and reloads the stored float32
    # values, so a run resumed from the same step must replay rows 4..6
    straight = (d["a1"] / "loss.csv").read_text().splitlines()
    first = (d["b"] / "loss.csv").read_text().splitlines()
    resumed = (d["c"] / "loss.csv").read_text().splitlines()
    trajectory = (straight[:4] == first and straight[4:] == resumed[1:]
                  and len(straight) == 7)

    ok = gen_same and fit_same and eval_same and trajectory
    report(9, "re-runs give identical manifests, resume replays the loss rows", ok,
            f"gen={gen_same} fit={fit_same} eval={eval_same} resume={trajectory}")


# -- 7 and 8: directional experiment suites ---------------------------------


@pytest.fixture(scope="session")
def experiment_results(tmp_path_factory):
    work = tmp_path_factory.mktemp("experiments")
    return ex.run_experiments(str(work), seeds=EXP_SEEDS, steps=EXP_STEPS)


def test_criterion_7_ablation_directions(experiment_results, report):
    checks = ("full_gt_semantic_only_all_ranges",
              "full_ge_photometric_only_all_ranges",
              "random_ge_fixed_offset_far_range",
              "more_labeled_views_better_at_far_offset",
              "full_plus0_ge_pseudo_label_accuracy")
    got = experiment_results["assertions"]
    failed = [k for k in checks if not got[k]]
    full = experiment_results["ablation"]["medians"]["full"]["iou"]
    report(7, "five directional assertions, medians over 3 seeds", not failed,
            f"full-model IoU by range {[round(v, 3) for v in full]}"
            + (f", failed {failed}" if failed else ""))


def test_criterion_8_label_quality_directions(experiment_results, report):
    checks = ("more_labeled_views_better_at_far_offset",
              "accuracy_non_increasing_with_offset",
              "full_plus0_ge_pseudo_label_accuracy")
    lq = experiment_results["label_quality"]
    failed = [k for k in checks if not lq["assertions"][k]]
    acc = {v: [round(a, 3) for a in lq["medians"][v]] for v in ("full",)}
    report(8, "segmentation accuracy ordering over offsets and variants",
            not failed,
            f"full accuracy by offset {acc['full']}, "
            f"pseudo labels {lq['pseudo_label_accuracy']:.3f}"
            + (f", failed {failed}" if failed else ""))


# -- 6: frozen reference regression -----------------------------------------


def test_criterion_6_reference_regression(tmp_path, report):
    scene_cfg = SceneConfig(seed=0, dims=(64, 64, 16), num_classes=6,
                            voxel_size=0.2, image_width=64, image_height=48,
                            num_steps=40, speed=1.4)
    ds = Dataset(scene_cfg)
    field_cfg = FieldConfig(image_width=64, image_height=48, num_classes=6)
    train_cfg = TrainConfig(steps=2000, seed=0, lr=1e-3, side_offset_range=(10, 39),
                            forward_offset=5, patches_per_image=6, patch_size=8,
                            checkpoint_every=500, dtype="float32")
    render_cfg = RenderConfig(num_samples=12, stochastic=True)
    t0 = time.perf_counter()
    ckpt, _ = fit(ds, field_cfg, train_cfg, render_cfg, LossWeights(), str(tmp_path))
    fit_min = (time.perf_counter() - t0) / 60.0

    with ad.default_dtype(np.float64):
        model = SemanticFieldModel(field_cfg, seed=0)
        state = load_checkpoint(ckpt, dtype=np.float64)
        model.load_state_arrays({k: v for k, v in state.items() if k in model.params})
        world = ds.world
        gt = sg.refine_invalids(sg.grid_from_world(world), street_z=7)
        spec = sg.VoxelGrid(dims=world.labels.shape, voxel_size=0.2, origin=gt.origin,
                            labels=np.zeros(world.labels.shape, np.int64),
                            invalid=np.zeros(world.labels.shape, bool), num_classes=6)
        inp = ds.frame(0, "front_left")
        fmap = model.encode(ad.constant(inp.image.astype(np.float64)))
        pred = sg.voxelize_field(model, fmap, inp.intrinsics, inp.pose, spec)
    full = sg.evaluate(pred, gt, [sg.EvalRange((12.8, 12.8, 3.2))]).results[0]

    ok = full.iou >= T_IOU and full.miou >= T_MIOU and fit_min < 30.0
    report(6, "frozen reference fit beats the regression thresholds", ok,
            f"IoU {full.iou:.4f} (need {T_IOU}), mIoU {full.miou:.4f} "
            f"(need {T_MIOU}), fit {fit_min:.1f} min (need 30)")
