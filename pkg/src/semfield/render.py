"""Differentiable volumetric rendering over the semantic field.

Rays carry m depth samples; densities integrate to per-sample weights via
transmittance, and weights integrate semantics, depth and reprojected source
colors.  Class probabilities are formed per sample point and then integrated
(integrating logits first and normalizing after gives a different, wrong
answer for mixed-class rays).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import pixel_ray, project


@dataclass(frozen=True)
class RenderConfig:
    num_samples: int = 32
    d_near: float = 0.5
    d_far: float = 14.0
    spacing: str = "linear"  # or "inverse"
    stochastic: bool = False

    def __post_init__(self):
        if self.spacing not in ("linear", "inverse"):
            raise ValueError(f"unknown spacing {self.spacing!r}")
        if not 0 < self.d_near < self.d_far:
            raise ValueError("need 0 < d_near < d_far")
        if self.num_samples < 1:
            raise ValueError("need at least one sample")

    def to_dict(self):
        return {
            "num_samples": self.num_samples,
            "d_near": self.d_near,
            "d_far": self.d_far,
            "spacing": self.spacing,
            "stochastic": self.stochastic,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _bin_edges(cfg):
    m = cfg.num_samples
    if cfg.spacing == "linear":
        return np.linspace(cfg.d_near, cfg.d_far, m + 1)
    # uniform in reciprocal depth, denser near the camera
    s = np.linspace(1.0 / cfg.d_near, 1.0 / cfg.d_far, m + 1)
    return 1.0 / s


def sample_depths(cfg, n_rays=None, rng=None):
    """Depth samples along a ray: (d, delta).

    Deterministic samples sit at bin midpoints in the spacing parameter
    (reciprocal-depth midpoints for "inverse"); stochastic samples are uniform
    within each depth bin, drawn independently per ray (shape (n_rays, m)).
    delta is the depth-bin width (m,) either way.
    """
    edges = _bin_edges(cfg)
    delta = np.diff(edges)
    if cfg.stochastic:
        if rng is None:
            raise ValueError("stochastic sampling needs an rng")
        n = 1 if n_rays is None else n_rays
        u = rng.uniform(0.0, 1.0, (n, cfg.num_samples))
        d = edges[:-1] + u * delta
        if n_rays is None:
            d = d[0]
    else:
        if cfg.spacing == "linear":
            d = 0.5 * (edges[:-1] + edges[1:])
        else:
            d = 2.0 / (1.0 / edges[:-1] + 1.0 / edges[1:])
        if n_rays is not None:
            d = np.broadcast_to(d, (n_rays, cfg.num_samples)).copy()
    return d, delta


def composite(sigma, delta):
    """Per-sample weights w_i = T_i * (1 - exp(-sigma_i delta_i)).

    sigma: Tensor (..., m); delta: array (m,) or (..., m).  Transmittance uses
    an exclusive cumulative sum of optical depth, so total weight never
    exceeds 1 no matter how saturated the ray is.
    """
    tau = sigma * ad.constant(np.asarray(delta, dtype=np.float64))
    trans = ad.exp(-ad.exclusive_cumsum(tau, axis=-1))
    alpha = -(ad.exp(-tau) - 1.0)
    return trans * alpha


def integrate(weights, values):
    """sum_i w_i v_i along the sample axis; values (..., m, k) or (..., m)."""
    if values.ndim == weights.ndim + 1:
        w = ad.reshape(weights, weights.shape + (1,))
    else:
        w = weights
    return ad.tsum(w * values, axis=weights.ndim - 1)


def _bilinear_np(img, uv):
    """Bilinear lookup of a constant (H, W, C) image at (N, 2) pixel coords."""
    h, w = img.shape[:2]
    x = np.clip(uv[:, 0], 0.0, w - 1.0)
    y = np.clip(uv[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(y), np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


@dataclass
class RenderResult:
    weights: "ad.Tensor"          # (n, m)
    probs: "ad.Tensor"            # (n, c) integrated class probabilities
    depth: "ad.Tensor"            # (n,) expected ray termination distance
    wsum: "ad.Tensor"             # (n,) total surface weight
    points: np.ndarray            # (n, m, 3) world-space sample points
    d: np.ndarray                 # (n, m) sample distances
    colors: list                  # per source: Tensor (n, 3)
    color_valid: np.ndarray       # (n, n_sources) bool
    point_valid: np.ndarray       # (n, m) bool, inside the input frustum

    @property
    def no_surface(self):
        return self.wsum.data <= 1e-6


# fraction of a ray's weight that must land inside a source view for its
# reprojected color to count
COLOR_VIEW_FRACTION = 0.99


def render_rays(model, fmap, input_intr, input_pose, origins, dirs, cfg,
                rng=None, sources=()):
    """Render a batch of rays against the field.

    origins, dirs: (n, 3) world-space rays (unit directions).  sources is a
    sequence of (image (H, W, 3) in [0, 1], intrinsics, pose); their colors
    are reprojected as constants, so gradients reach them only through the
    weights.  A source color is flagged invalid where less than
    COLOR_VIEW_FRACTION of the ray's weight projects inside that view, or
    where the ray has no surface weight at all.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    m = cfg.num_samples

    d, delta = sample_depths(cfg, n_rays=n, rng=rng)
    points = origins[:, None, :] + d[..., None] * dirs[:, None, :]

    sigma_flat, logits_flat, valid_flat = model.query_batch(
        fmap, input_intr, input_pose, points.reshape(-1, 3)
    )
    sigma = ad.reshape(sigma_flat, (n, m))
    weights = composite(sigma, delta)
    wsum = ad.tsum(weights, axis=1)

    probs_flat = ad.softmax(logits_flat)
    probs = integrate(weights, ad.reshape(probs_flat, (n, m, model.cfg.num_classes)))
    depth = integrate(weights, ad.constant(d))

    w_np = weights.data
    wsum_np = np.maximum(w_np.sum(axis=1), 1e-30)
    colors = []
    color_valid = np.zeros((n, len(sources)), dtype=bool)
    flat_pts = points.reshape(-1, 3)
    for k, (img, s_intr, s_pose) in enumerate(sources):
        uv, _, in_view = project(s_intr, s_pose, flat_pts)
        c = _bilinear_np(np.asarray(img, dtype=np.float64), uv).reshape(n, m, 3)
        colors.append(integrate(weights, ad.constant(c)))
        frac = (w_np * in_view.reshape(n, m)).sum(axis=1) / wsum_np
        color_valid[:, k] = (frac >= COLOR_VIEW_FRACTION) & (w_np.sum(axis=1) > 1e-6)

    return RenderResult(
        weights=weights,
        probs=probs,
        depth=depth,
        wsum=wsum,
        points=points,
        d=d,
        colors=colors,
        color_valid=color_valid,
        point_valid=valid_flat.reshape(n, m),
    )


def patch_rays(intr, pose, rect):
    """Rays for an axis-aligned pixel patch rect = (x0, y0, w, h)."""
    x0, y0, w, h = rect
    if x0 < 0 or y0 < 0 or x0 + w > intr.width or y0 + h > intr.height:
        raise ValueError("patch out of image bounds")
    xs, ys = np.meshgrid(np.arange(x0, x0 + w), np.arange(y0, y0 + h))
    uv = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(np.float64)
    return pixel_ray(intr, pose, uv)


def render_patch(model, fmap, input_intr, input_pose, target_intr, target_pose,
                 rect, cfg, rng=None, sources=()):
    """render_rays over a pixel patch of a target view."""
    rays = patch_rays(target_intr, target_pose, rect)
    return render_rays(
        model, fmap, input_intr, input_pose, rays.origin, rays.direction, cfg,
        rng=rng, sources=sources,
    )


def render_image(model, fmap, input_intr, input_pose, target_intr, target_pose,
                 cfg, sources=(), chunk=2048):
    """Full-frame inference render (no gradients).

    Returns dict of numpy maps: "classes" (H, W) argmax labels, "probs"
    (H, W, c), "depth" (H, W), "wsum" (H, W), and "color" (H, W, 3) when
    sources are given (first valid source per pixel, black where none).
    """
    h, w = target_intr.height, target_intr.width
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    uv = np.stack([xs, ys], axis=-1).reshape(-1, 2).astype(np.float64)
    rays = pixel_ray(target_intr, target_pose, uv)

    probs = np.zeros((h * w, model.cfg.num_classes))
    depth = np.zeros(h * w)
    wsum = np.zeros(h * w)
    color = np.zeros((h * w, 3)) if sources else None
    with ad.no_grad():
        for lo in range(0, h * w, chunk):
            hi = min(lo + chunk, h * w)
            res = render_rays(
                model, fmap, input_intr, input_pose,
                rays.origin[lo:hi], rays.direction[lo:hi], cfg, sources=sources,
            )
            probs[lo:hi] = res.probs.data
            depth[lo:hi] = res.depth.data
            wsum[lo:hi] = res.wsum.data
            if sources:
                for k in range(len(sources)):
                    take = res.color_valid[:, k] & (color[lo:hi] == 0).all(axis=1)
                    color[lo:hi][take] = res.colors[k].data[take]
    out = {
        "classes": probs.argmax(axis=1).reshape(h, w),
        "probs": probs.reshape(h, w, -1),
        "depth": depth.reshape(h, w),
        "wsum": wsum.reshape(h, w),
    }
    if sources:
        out["color"] = color.reshape(h, w, 3)
    return out
