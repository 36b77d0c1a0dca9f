"""Voxel-grid side of the pipeline.

Discretizes a fitted field into a labeled occupancy grid, refines the
evaluation mask (hide unobservable sub-street voxels), scores predictions
against ground truth at multiple ranges, and reads/writes the binary grid
format plus PLY/CSV exports.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import GRID_FORMAT_VERSION
from . import autodiff as ad
from .scenesim import CLASS_TABLE

GRID_MAGIC = b"S4CG"
GRID_VERSION = GRID_FORMAT_VERSION


class GridFormatError(ValueError):
    pass


@dataclass
class VoxelGrid:
    dims: tuple           # (X, Y, Z) voxel counts
    voxel_size: float
    origin: np.ndarray    # world position of voxel (0,0,0) low corner
    labels: np.ndarray    # X x Y x Z class ids, 0 = empty
    invalid: np.ndarray   # X x Y x Z bool, True = excluded from evaluation
    num_classes: int

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.labels = np.asarray(self.labels)
        self.invalid = np.asarray(self.invalid, dtype=bool)
        if self.labels.shape != self.dims or self.invalid.shape != self.dims:
            raise ValueError("labels/invalid shape does not match dims")
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise ValueError("label id outside [0, num_classes)")

    @property
    def extent(self):
        return np.asarray(self.dims) * self.voxel_size

    @property
    def occupied(self):
        return self.labels != 0

    def same_spec(self, other):
        return (self.dims == other.dims
                and np.isclose(self.voxel_size, other.voxel_size)
                and np.allclose(self.origin, other.origin)
                and self.num_classes == other.num_classes)

    def copy(self):
        return VoxelGrid(self.dims, self.voxel_size, self.origin.copy(),
                         self.labels.copy(), self.invalid.copy(), self.num_classes)


def grid_from_world(world):
    """Ground-truth grid for a simulated world (fully observed, no invalids)."""
    return VoxelGrid(
        dims=world.dims, voxel_size=world.voxel_size, origin=world.origin,
        labels=world.labels.copy(), invalid=np.zeros(world.dims, dtype=bool),
        num_classes=world.num_classes,
    )


# ---------------------------------------------------------------------------
# discretization


def _sub_offsets(n_sub):
    # n_sub must be a cube number: k points per axis at (i + 0.5)/k of the
    # voxel edge, e.g. 8 -> the 2x2x2 interior lattice at +-1/4 voxel
    k = int(round(n_sub ** (1.0 / 3.0)))
    if k < 1 or k ** 3 != n_sub:
        raise ValueError(f"n_sub must be a cube number >= 1, got {n_sub}")
    ticks = (np.arange(k) + 0.5) / k
    gx, gy, gz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def default_tau(voxel_size):
    """Density at which one voxel of travel is half opaque."""
    return float(np.log(2.0) / voxel_size)


def voxelize_field(model, fmap, input_intr, input_pose, grid_spec,
                   n_sub=8, tau=None, neighborhood=True, chunk=65536):
    """Discretize the field onto grid_spec (anything with dims/voxel_size/origin).

    Per voxel the field is probed at n_sub evenly spaced interior points; the
    raw occupancy is the max density over the probes and the class comes from
    the probe that attained it.  A voxel is occupied when its own raw
    occupancy exceeds tau or (with neighborhood=True) any 6-neighbor's does;
    carried voxels copy the class of their strongest over-threshold neighbor.
    Voxels with no probe inside the input frustum are marked invalid.
    """
    if tau is None:
        tau = default_tau(grid_spec.voxel_size)
    if tau <= 0:
        raise ValueError("tau must be positive")
    dims = tuple(int(d) for d in grid_spec.dims)
    vs = float(grid_spec.voxel_size)
    origin = np.asarray(grid_spec.origin, dtype=np.float64).reshape(3)
    offsets = _sub_offsets(n_sub)
    nv = int(np.prod(dims))
    ns = len(offsets)

    ii, jj, kk = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    corners = np.stack([ii, jj, kk], axis=-1).reshape(nv, 1, 3)
    pts = origin + (corners + offsets) * vs          # (nv, ns, 3)
    pts = pts.reshape(-1, 3)

    c = model.cfg.num_classes
    sigma = np.empty(nv * ns)
    probs = np.empty((nv * ns, c))
    valid = np.empty(nv * ns, dtype=bool)
    with ad.no_grad():
        for lo in range(0, nv * ns, chunk):
            hi = min(lo + chunk, nv * ns)
            s, l, v = model.query_batch(fmap, input_intr, input_pose, pts[lo:hi])
            e = np.exp(l.data - l.data.max(axis=1, keepdims=True))
            sigma[lo:hi] = s.data
            probs[lo:hi] = e / e.sum(axis=1, keepdims=True)
            valid[lo:hi] = v

    sigma = sigma.reshape(nv, ns)
    valid = valid.reshape(nv, ns)
    best = np.argmax(sigma, axis=1)
    raw = sigma[np.arange(nv), best].reshape(dims)
    cls = np.argmax(probs.reshape(nv, ns, c)[np.arange(nv), best], axis=1).reshape(dims)
    observed = valid.any(axis=1).reshape(dims)
    if not observed.any():
        raise ValueError("grid and input frustum are disjoint")

    over = raw > tau
    occupied = over.copy()
    labels = np.where(over, cls, 0)
    if neighborhood:
        # 6-connected dilation; carried voxels take the class of the
        # strongest over-threshold neighbor
        shifts = [(ax, d) for ax in range(3) for d in (1, -1)]
        neigh_raw = np.full((6,) + dims, -np.inf)
        neigh_cls = np.zeros((6,) + dims, dtype=cls.dtype)
        for s_i, (ax, d) in enumerate(shifts):
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            src[ax] = slice(None, -1) if d == 1 else slice(1, None)
            dst[ax] = slice(1, None) if d == 1 else slice(None, -1)
            nr = neigh_raw[s_i]
            nr[tuple(dst)] = np.where(over[tuple(src)], raw[tuple(src)], -np.inf)
            neigh_cls[s_i][tuple(dst)] = cls[tuple(src)]
        strongest = np.argmax(neigh_raw, axis=0)
        carried = ~over & (np.max(neigh_raw, axis=0) > tau)
        occupied |= carried
        take = np.take_along_axis(neigh_cls, strongest[None], axis=0)[0]
        labels = np.where(carried, take, labels)

    return VoxelGrid(dims=dims, voxel_size=vs, origin=origin,
                     labels=labels.astype(np.uint8), invalid=~observed,
                     num_classes=c)


# ---------------------------------------------------------------------------
# invalid-mask refinement


def refine_invalids(grid, street_z=7):
    """Mark unobservable sub-street voxels invalid.

    Per (x, y) column, a voxel at height z < street_z becomes invalid when
    every voxel at or below it is already invalid or empty (nothing between
    the street and it could have been observed).  Labels are untouched and a
    valid occupied voxel is never invalidated: its own chain term is false.
    Idempotent, since only already-empty-or-invalid positions are added.
    """
    nz = grid.dims[2]
    if not 0 <= street_z <= nz:
        raise ValueError(f"street_z must lie in [0, {nz}]")
    out = grid.copy()
    if street_z == 0:
        return out
    bad = grid.invalid | (grid.labels == 0)
    chain = np.logical_and.accumulate(bad, axis=2)
    out.invalid[:, :, :street_z] |= chain[:, :, :street_z]
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalRange:
    extent: tuple  # (x_max, y_max, z_max) meters from the grid origin

    def __post_init__(self):
        e = tuple(float(v) for v in self.extent)
        if len(e) != 3 or any(v <= 0 for v in e):
            raise ValueError("extent must be three positive lengths")
        object.__setattr__(self, "extent", e)

    def crop(self, grid):
        for v, full in zip(self.extent, grid.extent):
            if v > full + 1e-9:
                raise ValueError(f"range {self.extent} exceeds grid extent {tuple(grid.extent)}")
        return tuple(min(d, int(round(v / grid.voxel_size)))
                     for v, d in zip(self.extent, grid.dims))


@dataclass
class RangeResult:
    extent: tuple
    iou: float
    precision: float
    recall: float
    class_iou: np.ndarray  # (num_classes - 1,), semantic classes 1..c-1
    miou: float
    present: list          # class ids contributing to miou


@dataclass
class EvalReport:
    results: list = dc_field(default_factory=list)
    num_classes: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_max", "y_max", "z_max", "iou", "precision", "recall", "miou"]
                       + [f"iou_class_{i}" for i in range(1, self.num_classes)])
            for r in self.results:
                w.writerow([f"{v:g}" for v in r.extent]
                           + [f"{r.iou:.6f}", f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.miou:.6f}"]
                           + [f"{v:.6f}" for v in r.class_iou])


def _ratio(num, den):
    return float(num) / float(den) if den else 0.0


def evaluate(pred, gt, ranges):
    """Score pred against gt at each range; gt invalid voxels are excluded."""
    if not pred.same_spec(gt):
        raise ValueError("prediction and ground-truth grid specs differ")
    c = gt.num_classes
    report = EvalReport(num_classes=c)
    for rg in ranges:
        cx, cy, cz = rg.crop(gt)
        sl = (slice(0, cx), slice(0, cy), slice(0, cz))
        keep = ~gt.invalid[sl]
        p = pred.labels[sl][keep]
        g = gt.labels[sl][keep]
        po, go = p != 0, g != 0
        tp = int((po & go).sum())
        fp = int((po & ~go).sum())
        fn = int((~po & go).sum())
        class_iou = np.zeros(c - 1)
        present = sorted(set(np.unique(p[po]).tolist()) | set(np.unique(g[go]).tolist()))
        for ci in range(1, c):
            tpc = int(((p == ci) & (g == ci)).sum())
            denc = int(((p == ci) | (g == ci)).sum())
            class_iou[ci - 1] = _ratio(tpc, denc)
        miou = float(np.mean([class_iou[ci - 1] for ci in present])) if present else 0.0
        report.results.append(RangeResult(
            extent=rg.extent, iou=_ratio(tp, tp + fp + fn),
            precision=_ratio(tp, tp + fp), recall=_ratio(tp, tp + fn),
            class_iou=class_iou, miou=miou, present=present,
        ))
    return report


# ---------------------------------------------------------------------------
# binary grid format

# magic, version u16, dims 3xu32, voxel_size f32, origin 3xf32, classes u16,
# then labels u8 (x fastest), then the invalid mask packed 8 voxels per byte,
# same order; everything little-endian
_HEADER = struct.Struct("<4sH3IffffH")


def _flat(arr):
    # x-fastest linearization of an (X, Y, Z) array
    return np.ascontiguousarray(arr.transpose(2, 1, 0)).reshape(-1)


def _unflat(flat, dims):
    x, y, z = dims
    return flat.reshape(z, y, x).transpose(2, 1, 0)


def write_grid(path, grid):
    head = _HEADER.pack(GRID_MAGIC, GRID_VERSION, *grid.dims,
                        np.float32(grid.voxel_size),
                        *(np.float32(v) for v in grid.origin), grid.num_classes)
    body = _flat(grid.labels.astype(np.uint8)).tobytes()
    mask = np.packbits(_flat(grid.invalid).astype(np.uint8)).tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(body)
        fh.write(mask)
    os.replace(tmp, path)
    return path


def read_grid(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise GridFormatError("truncated header")
    magic, version, dx, dy, dz, vs, ox, oy, oz, classes = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported version {version}")
    dims = (dx, dy, dz)
    n = dx * dy * dz
    need = _HEADER.size + n + (n + 7) // 8
    if len(raw) < need:
        raise GridFormatError(f"truncated body: {len(raw)} bytes, need {need}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=_HEADER.size)
    bits = np.frombuffer(raw, dtype=np.uint8, count=(n + 7) // 8, offset=_HEADER.size + n)
    invalid = np.unpackbits(bits, count=n).astype(bool)
    if labels.size and labels.max() >= classes:
        raise GridFormatError("label id outside the declared class range")
    return VoxelGrid(dims=dims, voxel_size=float(vs),
                     origin=np.array([ox, oy, oz], dtype=np.float64),
                     labels=_unflat(labels.copy(), dims),
                     invalid=_unflat(invalid, dims), num_classes=int(classes))


# ---------------------------------------------------------------------------
# exports


def export_ply(path, grid, class_table=CLASS_TABLE):
    """Occupied voxel centers as colored PLY vertices (ascii, viewable anywhere)."""
    idx = np.argwhere(grid.occupied)
    centers = grid.origin + (idx + 0.5) * grid.voxel_size
    labels = grid.labels[grid.occupied]
    colors = np.array([c for _, c in class_table])
    if grid.num_classes > len(colors):
        extra = grid.num_classes - len(colors)
        rng = np.random.default_rng(0)
        colors = np.vstack([colors, rng.uniform(0.2, 0.9, (extra, 3))])
    rgb = (colors[labels] * 255).round().astype(int)
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(idx)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(centers, rgb):
        lines.append(f"{x:.4f} {y:.4f} {z:.4f} {r} {g} {b}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
