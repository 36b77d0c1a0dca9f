"""Self-supervised fitting loop.

Each step picks a reference timestep, gathers an 8-frame sample (two forward
stereo pairs plus four side views at random temporal offsets), draws pixel
patches, renders every patch ray against the field in one batched query, and
descends the weighted semantic + photometric + smoothness objective.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import autodiff as ad
from .camera import project
from .checkpoint import load_checkpoint, save_checkpoint
from .field import FieldConfig, SemanticFieldModel
from .losses import (
    _INVALID_COST,
    LossWeights,
    eas_loss,
    semantic_loss,
    ssim,
    total_loss,
)
from .optim import Adam
from .render import RenderConfig, _bilinear_np, composite, integrate, patch_rays, sample_depths
from .scenesim import rng_for

logger = logging.getLogger(__name__)

SEM_FRAME_MODES = ("full", "input_only", "front_only")


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    lr: float = 1e-4
    batch_size: int = 1            # scenes accumulated per step
    n_frames: int = 8              # 4 forward + 4 side
    side_offset_range: tuple = (10, 40)
    forward_offset: int = 5        # k, timesteps to the second stereo pair
    patches_per_image: int = 32
    patch_size: int = 8
    checkpoint_every: int = 500
    sem_frame_mode: str = "full"   # or "input_only", "front_only"
    use_semantic: bool = True
    use_photometric: bool = True
    fixed_side_offset: int = None  # o == const replaces the random draw
    dtype: str = "float32"         # "float64" for bit-level verification

    def __post_init__(self):
        if self.n_frames != 8:
            raise ValueError("the sampling layout is defined for 8 frames")
        lo, hi = self.side_offset_range
        if not 0 < lo <= hi:
            raise ValueError("side_offset_range must satisfy 0 < lo <= hi")
        if self.sem_frame_mode not in SEM_FRAME_MODES:
            raise ValueError(f"unknown sem_frame_mode {self.sem_frame_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.fixed_side_offset is not None and not lo <= self.fixed_side_offset <= hi:
            raise ValueError("fixed_side_offset must lie in side_offset_range")

    @property
    def max_offset(self):
        return max(self.forward_offset, self.side_offset_range[1])

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self):
        d = {
            "steps": self.steps,
            "seed": self.seed,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "n_frames": self.n_frames,
            "side_offset_range": list(self.side_offset_range),
            "forward_offset": self.forward_offset,
            "patches_per_image": self.patches_per_image,
            "patch_size": self.patch_size,
            "checkpoint_every": self.checkpoint_every,
            "sem_frame_mode": self.sem_frame_mode,
            "use_semantic": self.use_semantic,
            "use_photometric": self.use_photometric,
            "dtype": self.dtype,
        }
        if self.fixed_side_offset is not None:
            d["fixed_side_offset"] = self.fixed_side_offset
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "side_offset_range" in d:
            d["side_offset_range"] = tuple(d["side_offset_range"])
        return cls(**d)


@dataclass
class PatchTargets:
    color: np.ndarray     # (count, p, p, 3)
    labels: np.ndarray    # (count, p, p) pseudo-label ids
    frame_index: int      # into TrainingSample.frames
    rects: np.ndarray     # (count, 4) as (x0, y0, w, h)


@dataclass
class TrainingSample:
    frames: list          # 8 Frames, input first
    photo: list           # PatchTargets per photometric target frame
    sem: list             # PatchTargets per semantic target frame

    @property
    def input_frame(self):
        return self.frames[0]


@dataclass
class LossBreakdown:
    step: int
    l_sem: float
    l_ph: float
    l_eas: float
    total: float


def sample_side_offset(cfg, rng):
    if cfg.fixed_side_offset is not None:
        return cfg.fixed_side_offset
    lo, hi = cfg.side_offset_range
    return int(rng.integers(lo, hi + 1))


def sample_patch_rects(width, height, count, size, rng):
    """Uniform random in-bounds top-left corners, (count, 4) rects."""
    if width < size or height < size:
        raise ValueError("image smaller than the patch")
    x0 = rng.integers(0, width - size + 1, count)
    y0 = rng.integers(0, height - size + 1, count)
    return np.stack([x0, y0, np.full(count, size), np.full(count, size)], axis=1)


def _cut_patches(frame, rects, index):
    p = int(rects[0, 2])
    color = np.empty((len(rects), p, p, 3))
    labels = np.empty((len(rects), p, p), dtype=np.int64)
    for i, (x0, y0, w, h) in enumerate(rects):
        color[i] = frame.image[y0:y0 + h, x0:x0 + w]
        labels[i] = frame.seg[y0:y0 + h, x0:x0 + w]
    return PatchTargets(color=color, labels=labels, frame_index=index, rects=rects)


def sample_training_frames(dataset, t0, cfg, rng):
    """Assemble the 8-frame sample and its patch draws for one step.

    Frames: front stereo pair at t0 (left is the input), the pair at
    t0+forward_offset, then two views from each side camera at offsets drawn
    independently.  Photometric patches are drawn for the 7 non-input frames,
    semantic patches for the sem_frame_mode set; the two draws are separate.
    """
    k = cfg.forward_offset
    horizon = t0 + cfg.max_offset
    if horizon >= dataset.num_steps:
        raise ValueError(
            f"sequence too short: need timestep {horizon}, have {dataset.num_steps}"
        )
    spec = [("front_left", t0), ("front_right", t0), ("front_left", t0 + k), ("front_right", t0 + k)]
    for cam in ("side_left", "side_right"):
        for _ in range(2):
            spec.append((cam, t0 + sample_side_offset(cfg, rng)))
    frames = [dataset.frame(t, cam) for cam, t in spec]

    w, h = frames[0].intrinsics.width, frames[0].intrinsics.height
    photo = [
        _cut_patches(frames[i], sample_patch_rects(w, h, cfg.patches_per_image, cfg.patch_size, rng), i)
        for i in range(1, 8)
    ]
    sem_indices = {"full": range(8), "input_only": [0], "front_only": range(4)}[cfg.sem_frame_mode]
    sem = [
        _cut_patches(frames[i], sample_patch_rects(w, h, cfg.patches_per_image, cfg.patch_size, rng), i)
        for i in sem_indices
    ]
    return TrainingSample(frames=frames, photo=photo, sem=sem)


def _rays_for_targets(targets, frames):
    origins, dirs = [], []
    for tg in targets:
        f = frames[tg.frame_index]
        for rect in tg.rects:
            r = patch_rays(f.intrinsics, f.pose, tuple(rect))
            origins.append(r.origin)
            dirs.append(r.direction)
    if not origins:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(origins), np.concatenate(dirs)


def _forward(model, sample, cfg, weights, render_cfg, rng=None):
    """Loss graph for one sample; returns (total Tensor, LossBreakdown parts)."""
    frames = sample.frames
    inp = sample.input_frame
    p = cfg.patch_size
    ppi = cfg.patches_per_image
    fmap = model.encode(inp.image)

    photo = sample.photo if cfg.use_photometric else []
    sem = sample.sem if cfg.use_semantic else []
    po, pd = _rays_for_targets(photo, frames)
    so, sd = _rays_for_targets(sem, frames)
    n_photo, n_sem = len(po), len(so)
    if n_photo + n_sem == 0:
        raise TrainError("nothing to optimize: both loss families disabled")

    origins = np.concatenate([po, so])
    dirs = np.concatenate([pd, sd])
    n = len(origins)
    m = render_cfg.num_samples
    d, delta = sample_depths(render_cfg, n_rays=n, rng=rng)
    points = origins[:, None, :] + d[..., None] * dirs[:, None, :]

    sigma_flat, logits_sem, _ = model.query_batch(
        fmap, inp.intrinsics, inp.pose, points.reshape(-1, 3),
        logit_rows=slice(n_photo * m, n * m),
    )
    weights_all = composite(ad.reshape(sigma_flat, (n, m)), delta)

    zero = ad.constant(np.zeros(()))
    l_sem = zero
    if n_sem:
        w_sem = ad.getitem(weights_all, slice(n_photo, None))
        probs_pts = ad.softmax(logits_sem)
        probs = integrate(w_sem, ad.reshape(probs_pts, (n_sem, m, model.cfg.num_classes)))
        labels = np.concatenate([tg.labels.reshape(-1) for tg in sem])
        l_sem = semantic_loss(probs, labels, weights)

    l_ph = zero
    l_eas = zero
    if n_photo:
        w_ph = ad.getitem(weights_all, slice(0, n_photo))
        depth = integrate(w_ph, ad.constant(d[:n_photo]))
        w_np = w_ph.data
        wsum_np = w_np.sum(axis=1)
        flat_pts = points[:n_photo].reshape(-1, 3)
        pp = p * p
        n_patches = n_photo // pp
        n_src = len(frames) - 1  # every frame sources from all others

        # colors and validity for every (source slot, ray); single stacked
        # tensor pass afterwards keeps the tape small
        colors = np.empty((n_src, n_photo, m, 3))
        valid = np.empty((n_src, n_photo), dtype=bool)
        tgt_blocks = []
        row = 0
        for tg in photo:
            nb = len(tg.rects) * pp
            sl = slice(row, row + nb)
            pts_f = flat_pts[row * m:(row + nb) * m]
            others = [f for j, f in enumerate(frames) if j != tg.frame_index]
            for kk, src in enumerate(others):
                uv, _, in_view = project(src.intrinsics, src.pose, pts_f)
                colors[kk, sl] = _bilinear_np(src.image, uv).reshape(nb, m, 3)
                frac = (w_np[sl] * in_view.reshape(nb, m)).sum(axis=1) / np.maximum(wsum_np[sl], 1e-30)
                valid[kk, sl] = (frac >= 0.99) & (wsum_np[sl] > 1e-6)
            tgt_blocks.append(tg.color)
            row += nb
        target_patches = np.concatenate(tgt_blocks)  # (n_patches, p, p, 3)

        w3 = ad.reshape(w_ph, (1, n_photo, m, 1))
        rec = ad.tsum(w3 * ad.constant(colors), axis=2)  # (n_src, n_photo, 3)
        tgt_flat = ad.constant(target_patches.reshape(n_photo, 3))
        cost = ad.tmean(ad.absval(rec - tgt_flat), axis=2) * weights.lambda_L1
        if p >= 3:
            rec_p = ad.reshape(rec, (n_src * n_patches, p, p, 3))
            tgt_p = ad.constant(
                np.broadcast_to(target_patches, (n_src,) + target_patches.shape)
                .reshape(n_src * n_patches, p, p, 3).copy()
            )
            dis = ssim(rec_p, tgt_p)
            cost = cost + ad.reshape(dis, (n_src, n_photo)) * weights.lambda_SSIM
        cost = cost + ad.constant(np.where(valid, 0.0, _INVALID_COST))
        best = ad.tmin(cost, axis=0)
        has_valid = valid.any(axis=0)
        n_ok = int(has_valid.sum())
        if n_ok:
            l_ph = ad.tsum(best * ad.constant(has_valid.astype(np.float64))) / float(n_ok)
        else:
            logger.warning("photometric loss: every reconstruction invalid for every pixel")

        # smoothness only where every ray in the patch found a surface
        # (a zero-weight ray has depth 0, which 1/d cannot take)
        solid = wsum_np.reshape(n_patches, pp).min(axis=1) > 1e-6
        if solid.any():
            idx = np.where(solid)[0]
            d_patches = ad.reshape(depth, (n_patches, p, p))
            l_eas = eas_loss(ad.getitem(d_patches, idx), target_patches[idx])

    total = total_loss(l_sem, l_ph, l_eas, weights)
    return total, l_sem, l_ph, l_eas


def train_step(model, samples, cfg, weights, opt, render_cfg, rng=None):
    """One optimization step over one or more scene samples.

    samples: TrainingSample or list (gradient accumulation across scenes).
    Returns a LossBreakdown of the averaged losses.
    """
    if not isinstance(samples, (list, tuple)):
        samples = [samples]
    b = len(samples)
    parts = np.zeros(4)
    try:
        with ad.Tape() as tape:
            acc = None
            kept = []
            for s in samples:
                tot, ls, lp, le = _forward(model, s, cfg, weights, render_cfg, rng=rng)
                acc = tot if acc is None else acc + tot
                kept.append((tot, ls, lp, le))
            mean_total = acc / float(b)
            for tot, ls, lp, le in kept:
                parts += [float(ls.data), float(lp.data), float(le.data), float(tot.data)]
            tape.backward(mean_total)
    except ad.NonFiniteError as e:
        raise TrainError(_diagnose_nonfinite(model, samples, cfg, weights, render_cfg, e)) from e
    for p in model.params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    opt.step()
    parts /= b
    return LossBreakdown(step=opt.step_count, l_sem=parts[0], l_ph=parts[1],
                         l_eas=parts[2], total=parts[3])


def _diagnose_nonfinite(model, samples, cfg, weights, render_cfg, err):
    """Hunt down which patch makes the loss blow up, for the abort message."""
    for si, s in enumerate(samples):
        for kind in ("photo", "sem"):
            for tg in getattr(s, kind):
                for ri, rect in enumerate(tg.rects):
                    probe = TrainingSample(
                        frames=s.frames,
                        photo=[PatchTargets(tg.color[ri:ri + 1], tg.labels[ri:ri + 1],
                                            tg.frame_index, tg.rects[ri:ri + 1])]
                        if kind == "photo" else [],
                        sem=[PatchTargets(tg.color[ri:ri + 1], tg.labels[ri:ri + 1],
                                          tg.frame_index, tg.rects[ri:ri + 1])]
                        if kind == "sem" else [],
                    )
                    probe_cfg = replace(cfg, use_photometric=kind == "photo",
                                        use_semantic=kind == "sem")
                    try:
                        with ad.no_grad():
                            _forward(model, probe, probe_cfg, weights, render_cfg)
                    except ad.NonFiniteError:
                        msg = (f"non-finite loss: sample {si}, {kind} patch {ri} "
                               f"of frame {tg.frame_index} at rect {tuple(rect)}: {err}")
                        logger.error(msg)
                        return msg
    msg = f"non-finite loss (no single offending patch isolated): {err}"
    logger.error(msg)
    return msg


def fit(datasets, field_cfg, train_cfg, render_cfg, weights, out_dir,
        resume_from=None, hook=None):
    """Fit the field; writes checkpoint.s4cp and loss.csv under out_dir.

    datasets: one Dataset or a list (batch_size of them are cycled per step).
    hook(step, model), when given, runs after every checkpoint write.  After
    each save the just-written float32 values are loaded back, so a resumed
    run continues from bit-identical state.
    """
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.s4cp")
    csv_path = os.path.join(out_dir, "loss.csv")

    with ad.default_dtype(train_cfg.np_dtype):
        model = SemanticFieldModel(field_cfg, seed=train_cfg.seed)
        opt = Adam(model.params, lr=train_cfg.lr)
        start = 0
        if resume_from is not None:
            state = load_checkpoint(resume_from, dtype=train_cfg.np_dtype)
            model.load_state_arrays({k: v for k, v in state.items() if k in model.params})
            opt.load_state_tensors(state)
            start = opt.step_count

        def save():
            state = dict(model.state_arrays())
            state.update(opt.state_tensors())
            save_checkpoint(ckpt_path, state)
            reloaded = load_checkpoint(ckpt_path, dtype=train_cfg.np_dtype)
            model.load_state_arrays({k: v for k, v in reloaded.items() if k in model.params})
            opt.load_state_tensors(reloaded)

        new_csv = start == 0 or not os.path.exists(csv_path)
        with open(csv_path, "w" if new_csv else "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_csv:
                writer.writerow(["step", "l_sem", "l_ph", "l_eas", "total"])
            for i in range(start, train_cfg.steps):
                rng = rng_for(train_cfg.seed, "step", i)
                samples = []
                for ds in datasets[:max(1, train_cfg.batch_size)]:
                    t0_max = ds.num_steps - 1 - train_cfg.max_offset
                    if t0_max < 0:
                        raise ValueError("dataset sequence shorter than the maximum offset")
                    t0 = int(rng.integers(0, t0_max + 1))
                    samples.append(sample_training_frames(ds, t0, train_cfg, rng))
                lb = train_step(model, samples, train_cfg, weights, opt, render_cfg, rng=rng)
                writer.writerow([lb.step, f"{lb.l_sem:.8g}", f"{lb.l_ph:.8g}",
                                 f"{lb.l_eas:.8g}", f"{lb.total:.8g}"])
                if lb.step % train_cfg.checkpoint_every == 0 and lb.step < train_cfg.steps:
                    fh.flush()
                    save()
                    if hook is not None:
                        hook(lb.step, model)
            save()
            if hook is not None:
                hook(train_cfg.steps, model)
    return ckpt_path, csv_path
