"""Training objective: semantic, photometric (L1 + SSIM, min over sources)
and edge-aware smoothness terms, combined as a weighted sum.

All operations accept a single patch or a stacked batch of patches (leading
batch axis); batching keeps the tape small, which is what makes desk-scale
fitting fast.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

SEM_EPS = 1e-6
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
# pushes masked-out reconstruction costs past any real one inside the min
_INVALID_COST = 1e9


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 0.02
    lambda_ph: float = 1.0
    lambda_eas: float = 0.001
    lambda_L1: float = 0.15
    lambda_SSIM: float = 0.85
    class_weights: tuple = None

    def __post_init__(self):
        for f in ("lambda_seg", "lambda_ph", "lambda_eas", "lambda_L1", "lambda_SSIM"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
            if any(w < 0 for w in self.class_weights):
                raise ValueError("class weights must be >= 0")

    def to_dict(self):
        d = {
            "lambda_seg": self.lambda_seg,
            "lambda_ph": self.lambda_ph,
            "lambda_eas": self.lambda_eas,
            "lambda_L1": self.lambda_L1,
            "lambda_SSIM": self.lambda_SSIM,
        }
        if self.class_weights is not None:
            d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "class_weights" in d and d["class_weights"] is not None:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


def semantic_loss(pred, target, weights=LossWeights()):
    """Cross-entropy of pseudo-labels against the rendered distribution.

    pred: Tensor (..., c) of nonnegative integrated class probabilities;
    target: int array (...).  Per pixel -w_S log(max(pred[S], eps)), averaged.
    """
    c = pred.shape[-1]
    n = int(np.prod(pred.shape[:-1], dtype=np.int64))
    target = np.asarray(target).reshape(-1)
    if target.shape[0] != n:
        raise ad.ShapeError(f"target shape does not match pred: {target.shape[0]} vs {n} pixels")
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    flat = ad.reshape(pred, (n, c))
    picked = ad.getitem(flat, (np.arange(n), target))
    nll = -ad.log(ad.clamp(picked, lo=SEM_EPS))
    if weights.class_weights is not None:
        if len(weights.class_weights) != c:
            raise ValueError("class_weights length must equal the class count")
        w = np.asarray(weights.class_weights)[target]
        nll = nll * ad.constant(w)
    return ad.tmean(nll)


def _pool3(x):
    """3x3 box filter with replicate borders; x is NCHW."""
    h, w = x.shape[2], x.shape[3]
    p = ad.pad2d_replicate(x, 1)
    acc = None
    for i in range(3):
        for j in range(3):
            s = ad.getitem(p, (slice(None), slice(None), slice(i, i + h), slice(j, j + w)))
            acc = s if acc is None else acc + s
    return acc / 9.0


def ssim(a, b):
    """Per-pixel structural dissimilarity (1 - SSIM)/2 in [0, 1].

    a, b: Tensors (h, w, c) or (B, h, w, c); the window is a 3x3 box filter
    (replicate borders), statistics per channel, channels averaged.  Returns
    (h, w) / (B, h, w).
    """
    if a.shape != b.shape:
        raise ad.ShapeError(f"ssim patch shapes differ: {a.shape} vs {b.shape}")
    single = a.ndim == 3
    if single:
        a = ad.reshape(a, (1,) + a.shape)
        b = ad.reshape(b, (1,) + b.shape)
    if a.ndim != 4:
        raise ad.ShapeError("ssim expects (h, w, c) or (B, h, w, c) patches")
    if a.shape[1] < 3 or a.shape[2] < 3:
        raise ValueError("ssim patch smaller than the 3x3 window")

    x = ad.transpose(a, (0, 3, 1, 2))
    y = ad.transpose(b, (0, 3, 1, 2))
    mx, my = _pool3(x), _pool3(y)
    sx = _pool3(x * x) - mx * mx
    sy = _pool3(y * y) - my * my
    sxy = _pool3(x * y) - mx * my
    num = (mx * my * 2.0 + _SSIM_C1) * (sxy * 2.0 + _SSIM_C2)
    den = (mx * mx + my * my + _SSIM_C1) * (sx + sy + _SSIM_C2)
    dissim = -(num / den - 1.0) * 0.5
    out = ad.tmean(ad.clamp(dissim, lo=0.0, hi=1.0), axis=1)  # channel average
    if single:
        out = ad.getitem(out, 0)
    return out


def photometric_loss(target, recons, weights=LossWeights()):
    """Min-over-sources photometric cost.

    target: Tensor/array (..., h, w, 3).  recons: nonempty list of
    (reconstruction Tensor same shape, valid bool (..., h, w)).  Per pixel
    cost_k = lambda_L1 * mean|P - P_k| + lambda_SSIM * ssim; the minimum over
    valid sources is averaged over pixels that have one.  If no pixel has a
    valid source anywhere, the loss is zero (warned, nothing to supervise).
    Patches smaller than the SSIM window fall back to the L1 term alone.
    """
    if not recons:
        raise ValueError("photometric loss needs at least one reconstruction")
    target = target if isinstance(target, ad.Tensor) else ad.constant(target)
    use_ssim = target.shape[-3] >= 3 and target.shape[-2] >= 3

    costs = []
    valids = []
    for rec, valid in recons:
        l1 = ad.tmean(ad.absval(rec - target), axis=target.ndim - 1)
        cost = l1 * weights.lambda_L1
        if use_ssim:
            cost = cost + ssim(rec, target) * weights.lambda_SSIM
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), cost.shape)
        costs.append(cost + ad.constant(np.where(valid, 0.0, _INVALID_COST)))
        valids.append(valid)

    k = len(costs)
    stacked = ad.concat([ad.reshape(c, (1,) + c.shape) for c in costs], axis=0)
    best = ad.tmin(stacked, axis=0)
    has_valid = np.stack(valids, axis=0).any(axis=0)
    n_ok = int(has_valid.sum())
    if n_ok == 0:
        logger.warning("photometric loss: every reconstruction invalid for every pixel")
        return ad.constant(0.0)
    # invalid pixels drop out; the 0-mask also severs their gradient path
    return ad.tsum(best * ad.constant(has_valid.astype(np.float64))) / float(n_ok)


def eas_loss(depth_patch, color_patch):
    """Edge-aware smoothness of mean-normalized inverse depth.

    depth_patch: Tensor (..., h, w) of rendered depths, all > 0; color_patch:
    array (..., h, w, 3).  Forward differences of d* = (1/d) / mean(1/d) are
    penalized except across color edges.
    """
    if np.any(depth_patch.data <= 0):
        raise ValueError("eas needs strictly positive depths")
    if depth_patch.shape[-1] < 2 or depth_patch.shape[-2] < 2:
        raise ValueError("eas needs at least a 2x2 patch")
    color = np.asarray(color_patch.data if isinstance(color_patch, ad.Tensor) else color_patch)

    disp = 1.0 / depth_patch
    lead = disp.shape[:-2]
    n = disp.shape[-2] * disp.shape[-1]
    flat = ad.reshape(disp, lead + (n,))
    mean = ad.reshape(ad.tmean(flat, axis=len(lead)), lead + (1, 1))
    dstar = disp / mean

    ell = (Ellipsis,)
    dx = ad.absval(dstar[ell + (slice(None), slice(1, None))] - dstar[ell + (slice(None), slice(None, -1))])
    dy = ad.absval(dstar[ell + (slice(1, None), slice(None))] - dstar[ell + (slice(None, -1), slice(None))])
    gx = np.abs(color[..., :, 1:, :] - color[..., :, :-1, :]).mean(axis=-1)
    gy = np.abs(color[..., 1:, :, :] - color[..., :-1, :, :]).mean(axis=-1)
    return ad.tmean(dx * ad.constant(np.exp(-gx))) + ad.tmean(dy * ad.constant(np.exp(-gy)))


def total_loss(l_sem, l_ph, l_eas, weights=LossWeights()):
    """lambda_seg L_sem + lambda_ph L_ph + lambda_eas L_eas."""
    return (
        l_sem * weights.lambda_seg
        + l_ph * weights.lambda_ph
        + l_eas * weights.lambda_eas
    )
