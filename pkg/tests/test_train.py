"""Trainer tests: sampling layout, loss assembly, determinism, resume."""

import csv
import hashlib
import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from semfield import autodiff as ad
from semfield import train as tr
from semfield.checkpoint import load_checkpoint
from semfield.field import FieldConfig, SemanticFieldModel
from semfield.losses import LossWeights, photometric_loss
from semfield.optim import Adam
from semfield.render import RenderConfig, _bilinear_np, composite, integrate, sample_depths
from semfield.camera import project
from semfield.scenesim import Dataset, SceneConfig, rng_for


SMALL_SCENE = SceneConfig(
    seed=3, dims=(48, 48, 12), num_classes=6, voxel_size=0.2,
    image_width=32, image_height=24, num_steps=30, speed=0.8,
)


@pytest.fixture(scope="module")
def train_ds():
    return Dataset(SMALL_SCENE)


def small_cfg(**kw):
    base = dict(steps=2, seed=0, side_offset_range=(5, 8), forward_offset=3,
                patches_per_image=2, patch_size=4, checkpoint_every=1000,
                dtype="float64")
    base.update(kw)
    return tr.TrainConfig(**base)


def small_field_cfg():
    return FieldConfig(image_width=32, image_height=24, num_classes=6)


# ---------------------------------------------------------------------------
# offset and patch sampling


def test_side_offsets_within_range():
    cfg = tr.TrainConfig(side_offset_range=(10, 40))
    rng = np.random.default_rng(0)
    draws = [tr.sample_side_offset(cfg, rng) for _ in range(1000)]
    assert min(draws) >= 10 and max(draws) <= 40


def test_side_offsets_uniform():
    # chi-square against the discrete uniform over {10..40}
    cfg = tr.TrainConfig(side_offset_range=(10, 40))
    rng = np.random.default_rng(7)
    draws = np.array([tr.sample_side_offset(cfg, rng) for _ in range(3100)])
    counts = np.bincount(draws - 10, minlength=31)
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_fixed_side_offset():
    cfg = tr.TrainConfig(side_offset_range=(10, 40), fixed_side_offset=12)
    rng = np.random.default_rng(0)
    assert all(tr.sample_side_offset(cfg, rng) == 12 for _ in range(20))


@settings(max_examples=60, deadline=None)
@given(
    w=st.integers(6, 80), h=st.integers(6, 80),
    size=st.integers(2, 6), count=st.integers(1, 16), seed=st.integers(0, 99),
)
def test_patch_rects_stay_in_bounds(w, h, size, count, seed):
    if w < size or h < size:
        with pytest.raises(ValueError):
            tr.sample_patch_rects(w, h, count, size, np.random.default_rng(seed))
        return
    rects = tr.sample_patch_rects(w, h, count, size, np.random.default_rng(seed))
    assert rects.shape == (count, 4)
    assert np.all(rects[:, 0] >= 0) and np.all(rects[:, 0] + rects[:, 2] <= w)
    assert np.all(rects[:, 1] >= 0) and np.all(rects[:, 1] + rects[:, 3] <= h)
    assert np.all(rects[:, 2] == size) and np.all(rects[:, 3] == size)


def test_patch_rects_deterministic():
    a = tr.sample_patch_rects(64, 48, 8, 8, np.random.default_rng(5))
    b = tr.sample_patch_rects(64, 48, 8, 8, np.random.default_rng(5))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# frame sampling


def test_sample_frames_layout(train_ds):
    cfg = small_cfg()
    rng = np.random.default_rng(1)
    s = tr.sample_training_frames(train_ds, 4, cfg, rng)
    cams = [f.cam for f in s.frames]
    steps = [f.timestep for f in s.frames]
    assert cams[:4] == ["front_left", "front_right", "front_left", "front_right"]
    assert steps[:4] == [4, 4, 4 + cfg.forward_offset, 4 + cfg.forward_offset]
    assert cams[4:] == ["side_left", "side_left", "side_right", "side_right"]
    lo, hi = cfg.side_offset_range
    for t in steps[4:]:
        assert 4 + lo <= t <= 4 + hi
    assert s.input_frame is s.frames[0]
    assert [tg.frame_index for tg in s.photo] == [1, 2, 3, 4, 5, 6, 7]
    assert [tg.frame_index for tg in s.sem] == list(range(8))
    for tg in s.photo + s.sem:
        assert tg.color.shape == (2, 4, 4, 3)
        assert tg.labels.shape == (2, 4, 4)


def test_sem_frame_modes(train_ds):
    rng = np.random.default_rng(1)
    s = tr.sample_training_frames(train_ds, 2, small_cfg(sem_frame_mode="input_only"), rng)
    assert [tg.frame_index for tg in s.sem] == [0]
    s = tr.sample_training_frames(train_ds, 2, small_cfg(sem_frame_mode="front_only"), rng)
    assert [tg.frame_index for tg in s.sem] == [0, 1, 2, 3]


def test_patch_content_matches_frame(train_ds):
    rng = np.random.default_rng(2)
    s = tr.sample_training_frames(train_ds, 0, small_cfg(), rng)
    tg = s.photo[3]
    f = s.frames[tg.frame_index]
    x0, y0, w, h = tg.rects[0]
    assert np.array_equal(tg.color[0], f.image[y0:y0 + h, x0:x0 + w])
    assert np.array_equal(tg.labels[0], f.seg[y0:y0 + h, x0:x0 + w])


def test_sequence_too_short(train_ds):
    cfg = small_cfg(side_offset_range=(5, 40))
    with pytest.raises(ValueError, match="too short"):
        tr.sample_training_frames(train_ds, 0, cfg, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(n_frames=6)
    with pytest.raises(ValueError):
        tr.TrainConfig(side_offset_range=(0, 10))
    with pytest.raises(ValueError):
        tr.TrainConfig(side_offset_range=(12, 10))
    with pytest.raises(ValueError):
        tr.TrainConfig(sem_frame_mode="everything")
    with pytest.raises(ValueError):
        tr.TrainConfig(dtype="float16")
    with pytest.raises(ValueError):
        tr.TrainConfig(fixed_side_offset=50)
    with pytest.raises(ValueError):
        tr.TrainConfig(patch_size=1)


def test_config_roundtrip():
    cfg = tr.TrainConfig(steps=10, fixed_side_offset=11, side_offset_range=(10, 20))
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# forward pass


def _make(train_ds, cfg, seed=0, t0=2):
    model = SemanticFieldModel(small_field_cfg(), seed=seed)
    rng = np.random.default_rng(seed + 100)
    sample = tr.sample_training_frames(train_ds, t0, cfg, rng)
    return model, sample


def test_forward_parts_combine(train_ds):
    cfg = small_cfg()
    w = LossWeights()
    model, sample = _make(train_ds, cfg)
    rc = RenderConfig(num_samples=6)
    with ad.no_grad():
        total, ls, lp, le = tr._forward(model, sample, cfg, w, rc)
    expect = w.lambda_seg * float(ls.data) + w.lambda_ph * float(lp.data) + w.lambda_eas * float(le.data)
    assert np.isclose(float(total.data), expect, rtol=1e-12)
    assert np.isfinite([float(ls.data), float(lp.data), float(le.data)]).all()


def test_fused_photometric_matches_reference(train_ds):
    # the trainer's stacked min-over-sources evaluation must equal one
    # photometric_loss call over the same patches
    cfg = small_cfg()
    w = LossWeights()
    model, sample = _make(train_ds, cfg, seed=1)
    rc = RenderConfig(num_samples=6)
    with ad.no_grad():
        _, _, lp, _ = tr._forward(model, sample, cfg, w, rc)

        frames = sample.frames
        inp = sample.input_frame
        fmap = model.encode(inp.image)
        po, pd = tr._rays_for_targets(sample.photo, frames)
        n, m, p = len(po), rc.num_samples, cfg.patch_size
        d, delta = sample_depths(rc, n_rays=n)
        pts = po[:, None, :] + d[..., None] * pd[:, None, :]
        sigma, _, _ = model.query_batch(fmap, inp.intrinsics, inp.pose,
                                        pts.reshape(-1, 3), logit_rows=slice(0, 0))
        wgt = composite(ad.reshape(sigma, (n, m)), delta)
        wsum = wgt.data.sum(axis=1)
        pp = p * p
        n_patches = n // pp

        recons = []
        for k in range(len(frames) - 1):
            colors = np.empty((n, m, 3))
            valid = np.empty(n, dtype=bool)
            row = 0
            for tg in sample.photo:
                nb = len(tg.rects) * pp
                sl = slice(row, row + nb)
                src = [f for j, f in enumerate(frames) if j != tg.frame_index][k]
                seg_pts = pts.reshape(-1, 3)[row * m:(row + nb) * m]
                uv, _, in_view = project(src.intrinsics, src.pose, seg_pts)
                colors[sl] = _bilinear_np(src.image, uv).reshape(nb, m, 3)
                frac = (wgt.data[sl] * in_view.reshape(nb, m)).sum(axis=1) / np.maximum(wsum[sl], 1e-30)
                valid[sl] = (frac >= 0.99) & (wsum[sl] > 1e-6)
                row += nb
            rec = integrate(wgt, ad.constant(colors))
            recons.append((ad.reshape(rec, (n_patches, p, p, 3)),
                           valid.reshape(n_patches, p, p)))

        target = np.concatenate([tg.color for tg in sample.photo])
        ref = photometric_loss(target, recons, w)
    assert np.isclose(float(lp.data), float(ref.data), rtol=1e-10)


def test_batch_of_two_averages(train_ds):
    cfg = small_cfg()
    w = LossWeights()
    rc = RenderConfig(num_samples=5)
    _, s1 = _make(train_ds, cfg, seed=0, t0=1)
    _, s2 = _make(train_ds, cfg, seed=1, t0=6)

    def run(samples):
        model = SemanticFieldModel(small_field_cfg(), seed=4)
        opt = Adam(model.params, lr=1e-4)
        return tr.train_step(model, samples, cfg, w, opt, rc)

    a, b, c = run(s1), run(s2), run([s1, s2])
    assert np.isclose(c.total, (a.total + b.total) / 2, rtol=1e-12)
    assert np.isclose(c.l_sem, (a.l_sem + b.l_sem) / 2, rtol=1e-12)


# ---------------------------------------------------------------------------
# ablation switches


def test_photometric_only_freezes_class_head(train_ds):
    cfg = small_cfg(use_semantic=False)
    model, sample = _make(train_ds, cfg)
    before = {k: v.data.copy() for k, v in model.params.items()}
    opt = Adam(model.params, lr=1e-3)
    lb = tr.train_step(model, sample, cfg, LossWeights(), opt, RenderConfig(num_samples=5))
    assert lb.l_sem == 0.0
    for k in model.params:
        if k.startswith("phi_S."):
            assert np.array_equal(model.params[k].data, before[k]), k
    assert not np.array_equal(model.params["phi_D.w0"].data, before["phi_D.w0"])
    assert not np.array_equal(model.params["fmap"].data, before["fmap"])


def test_semantic_only_still_moves_density(train_ds):
    # class supervision reaches sigma through the compositing weights
    cfg = small_cfg(use_photometric=False)
    model, sample = _make(train_ds, cfg)
    before = {k: v.data.copy() for k, v in model.params.items()}
    opt = Adam(model.params, lr=1e-3)
    lb = tr.train_step(model, sample, cfg, LossWeights(), opt, RenderConfig(num_samples=5))
    assert lb.l_ph == 0.0 and lb.l_eas == 0.0
    assert not np.array_equal(model.params["phi_D.w0"].data, before["phi_D.w0"])
    assert not np.array_equal(model.params["phi_S.w0"].data, before["phi_S.w0"])


def test_both_disabled_raises(train_ds):
    cfg = small_cfg(use_photometric=False, use_semantic=False)
    model, sample = _make(train_ds, cfg)
    opt = Adam(model.params, lr=1e-3)
    with pytest.raises(tr.TrainError, match="disabled"):
        tr.train_step(model, sample, cfg, LossWeights(), opt, RenderConfig(num_samples=5))


def test_nonfinite_is_diagnosed(train_ds):
    cfg = small_cfg()
    model, sample = _make(train_ds, cfg)
    model.params["fmap"].data[...] = np.inf
    opt = Adam(model.params, lr=1e-3)
    with pytest.raises(tr.TrainError, match="non-finite"):
        tr.train_step(model, sample, cfg, LossWeights(), opt, RenderConfig(num_samples=5))


# ---------------------------------------------------------------------------
# step determinism


def test_train_step_deterministic(train_ds):
    cfg = small_cfg()

    def run():
        model, sample = _make(train_ds, cfg, seed=9)
        opt = Adam(model.params, lr=1e-3)
        lb = tr.train_step(model, sample, cfg, LossWeights(), opt, RenderConfig(num_samples=5))
        return lb, {k: v.data.copy() for k, v in model.params.items()}

    lb1, p1 = run()
    lb2, p2 = run()
    assert lb1 == lb2
    for k in p1:
        assert np.array_equal(p1[k], p2[k]), k


# ---------------------------------------------------------------------------
# fit loop


def _fit_args(tmp, **kw):
    tcfg = dict(steps=6, seed=0, side_offset_range=(5, 8), forward_offset=3,
                patches_per_image=2, patch_size=4, checkpoint_every=3,
                dtype="float32")
    tcfg.update(kw)
    return dict(
        datasets=Dataset(SMALL_SCENE),
        field_cfg=small_field_cfg(),
        train_cfg=tr.TrainConfig(**tcfg),
        render_cfg=RenderConfig(num_samples=5),
        weights=LossWeights(),
        out_dir=str(tmp),
    )


def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_fit_outputs(tmp_path):
    ckpt, csv_path = tr.fit(**_fit_args(tmp_path / "a"))
    assert os.path.exists(ckpt) and os.path.exists(csv_path)
    rows = _read_csv(csv_path)
    assert rows[0] == ["step", "l_sem", "l_ph", "l_eas", "total"]
    assert len(rows) == 7 and rows[1][0] == "1" and rows[-1][0] == "6"
    state = load_checkpoint(ckpt)
    model = SemanticFieldModel(small_field_cfg(), seed=0)
    assert set(model.params) <= set(state)
    assert int(round(float(state["__step__"][0]))) == 6


def test_fit_deterministic(tmp_path):
    tr.fit(**_fit_args(tmp_path / "a"))
    tr.fit(**_fit_args(tmp_path / "b"))
    assert _sha(tmp_path / "a" / "checkpoint.s4cp") == _sha(tmp_path / "b" / "checkpoint.s4cp")
    assert _read_csv(tmp_path / "a" / "loss.csv") == _read_csv(tmp_path / "b" / "loss.csv")


def test_fit_zero_steps_saves_init(tmp_path):
    ckpt, csv_path = tr.fit(**_fit_args(tmp_path, steps=0))
    assert len(_read_csv(csv_path)) == 1  # header only
    state = load_checkpoint(ckpt, dtype=np.float32)
    with ad.default_dtype(np.float32):
        fresh = SemanticFieldModel(small_field_cfg(), seed=0)
    for k, v in fresh.state_arrays().items():
        assert np.array_equal(state[k], v), k


def test_resume_matches_straight_run(tmp_path):
    # 6 straight steps vs 3 steps, checkpoint, resume for 3 more; the saved
    # float32 state is reloaded right after writing, so both trajectories
    # pass through identical quantized states
    tr.fit(**_fit_args(tmp_path / "full"))
    ckpt3, _ = tr.fit(**_fit_args(tmp_path / "half", steps=3))
    ckpt6, csv6 = tr.fit(**_fit_args(tmp_path / "resumed"), resume_from=ckpt3)
    full_rows = _read_csv(tmp_path / "full" / "loss.csv")
    res_rows = _read_csv(csv6)
    assert res_rows[1:] == full_rows[4:]
    assert _sha(ckpt6) == _sha(tmp_path / "full" / "checkpoint.s4cp")


def test_fit_loss_decreases(tmp_path):
    args = _fit_args(tmp_path, steps=200, checkpoint_every=1000)
    args["train_cfg"] = replace(args["train_cfg"], steps=200, lr=1e-3)
    _, csv_path = tr.fit(**args)
    rows = _read_csv(csv_path)[1:]
    total = np.array([float(r[4]) for r in rows])
    sem = np.array([float(r[1]) for r in rows])
    assert len(total) == 200
    assert total[-30:].mean() < total[:30].mean()
    assert sem[-30:].mean() < sem[:30].mean()


def test_fit_hook_called(tmp_path):
    calls = []
    tr.fit(**_fit_args(tmp_path), hook=lambda step, model: calls.append(step))
    assert calls == [3, 6]
