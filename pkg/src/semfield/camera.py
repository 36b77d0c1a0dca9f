"""Pinhole cameras, rigid poses, pixel rays, and sinusoidal positional encoding.

Conventions used throughout:
  - camera frame: +z forward (optical axis), +x right, +y down
  - pixel centers sit at integer coordinates; (0, 0) is the top-left center
  - Pose.T maps camera coordinates to world coordinates (world-from-camera)

All functions are pure and vectorized over leading axes where that is useful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POSE_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def to_dict(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def intrinsics_from_fov(fov_x_deg, width, height):
    """Symmetric pinhole where the edge pixel *centers* span the given FoV.

    fx follows from tan(fov/2) = ((W-1)/2)/fx; fy reuses fx (square pixels).
    """
    half = np.deg2rad(fov_x_deg) / 2.0
    fx = ((width - 1) / 2.0) / np.tan(half)
    return Intrinsics(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    T: np.ndarray  # 4x4

    def __post_init__(self):
        T = np.asarray(self.T, dtype=np.float64)
        object.__setattr__(self, "T", T)
        if T.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {T.shape}")
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > POSE_ORTHO_TOL:
            raise ValueError("pose rotation block is not orthonormal")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("pose last row must be (0,0,0,1)")

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, R, t):
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = t
        return cls(T)

    @property
    def R(self):
        return self.T[:3, :3]

    @property
    def t(self):
        return self.T[:3, 3]

    def inverse(self):
        Rt = self.R.T
        return Pose.from_rt(Rt, -Rt @ self.t)

    def compose(self, other):
        """self applied after other: (self @ other) maps other's input frame."""
        return Pose(self.T @ other.T)

    def apply(self, pts):
        """Transform points (..., 3) from camera frame to world frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t


@dataclass
class Ray:
    """Bundle of rays: world-space origins and unit directions, (..., 3)."""

    origin: np.ndarray
    direction: np.ndarray
    pixel: np.ndarray  # source pixel coords (..., 2), (x, y)

    def point_at(self, d):
        d = np.asarray(d, dtype=np.float64)
        return self.origin + d[..., None] * self.direction


def project(intr, pose, pts):
    """Project world points (..., 3) into a camera.

    Returns (uv, z, in_view): pixel coords (..., 2), camera-frame depth (...,)
    and a bool flag which is False behind the camera or outside the image
    footprint [0, W-1] x [0, H-1].  Out-of-view is a flagged result, never an
    error.
    """
    pts = np.asarray(pts, dtype=np.float64)
    cam = (pts - pose.t) @ pose.R  # world -> camera: R^T (x - t)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[..., 0] / z + intr.cx
        v = intr.fy * cam[..., 1] / z + intr.cy
    uv = np.stack([u, v], axis=-1)
    in_view = (
        (z > 0)
        & (u >= 0)
        & (u <= intr.width - 1)
        & (v >= 0)
        & (v <= intr.height - 1)
    )
    bad = ~np.isfinite(uv)
    if bad.any():
        uv = np.where(bad, 0.0, uv)
    return uv, z, in_view


def pixel_ray(intr, pose, uv):
    """World-space rays through pixel coords (..., 2).

    Directions are unit-norm; ray distance along `direction` is Euclidean, and
    z-depth of a point at distance d is d * direction_z(camera frame).
    """
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    if np.any(u < 0) or np.any(u > intr.width - 1) or np.any(v < 0) or np.any(v > intr.height - 1):
        raise ValueError("pixel coordinates out of image bounds")
    d_cam = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)],
        axis=-1,
    )
    d_world = d_cam @ pose.R.T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = np.broadcast_to(pose.t, d_world.shape).copy()
    return Ray(origin=origin, direction=d_world, pixel=uv)


def ray_z_scale(pose, direction):
    """cos factor converting ray distance to camera z-depth (forward component)."""
    return np.asarray(direction) @ pose.R[:, 2]


# ---------------------------------------------------------------------------
# Positional encoding


@dataclass(frozen=True)
class PosEncConfig:
    """Sinusoidal encoding with L octaves; inputs normalized to [-1, 1]."""

    num_frequencies: int = 6

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    @property
    def out_dim(self):
        return 2 * self.num_frequencies


def normalize_unit(v, lo, hi):
    """Affine map [lo, hi] -> [-1, 1]."""
    return 2.0 * (np.asarray(v, dtype=np.float64) - lo) / (hi - lo) - 1.0


def posenc(v, cfg):
    """Encode scalars (...,) as (..., 2L): (sin 2^j pi v, cos 2^j pi v), j < L.

    Float input keeps its precision (float32 stays float32); everything else
    is promoted to float64.
    """
    v = np.asarray(v)
    if v.dtype not in (np.float32, np.float64):
        v = v.astype(np.float64)
    L = cfg.num_frequencies
    if L == 0:
        return np.zeros(v.shape + (0,), dtype=v.dtype)
    freqs = ((2.0 ** np.arange(L)) * np.pi).astype(v.dtype)
    ang = v[..., None] * freqs
    out = np.empty(v.shape + (2 * L,), dtype=v.dtype)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out
