"""Synthetic ground-truth worlds and their exact renderer.

A voxel world (z-up) holds class ids per cell; a four-camera rig rides a
vehicle down the road corridor; ray casting against the grid (Amanatides-Woo
traversal) gives exact depth/class per pixel, from which color frames are
shaded.  A corruption model degrades the exact segmentation into the kind of
imperfect pseudo-labels an off-the-shelf network would produce.

Everything here is a pure function of (seed, config).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Intrinsics, Pose, intrinsics_from_fov, pixel_ray

# class id 0 is both "empty voxel" and "background pixel"
CLASS_TABLE = (
    ("background", (0.62, 0.71, 0.82)),
    ("road", (0.26, 0.26, 0.30)),
    ("terrain", (0.38, 0.52, 0.22)),
    ("building", (0.66, 0.50, 0.38)),
    ("car", (0.72, 0.16, 0.12)),
    ("vegetation", (0.12, 0.42, 0.14)),
)

LIGHT_DIR = np.array([0.5, 0.25, -1.0]) / np.linalg.norm([0.5, 0.25, -1.0])
AMBIENT = 0.35


def rng_for(*keys):
    """Deterministic generator from structured keys (stable across runs)."""
    h = hashlib.sha256("/".join(map(str, keys)).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


@dataclass
class VoxelWorld:
    dims: tuple  # (X, Y, Z) voxel counts
    voxel_size: float
    origin: np.ndarray  # world position of voxel (0,0,0) low corner
    labels: np.ndarray  # X x Y x Z uint8, 0 = empty
    class_table: tuple = CLASS_TABLE
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.class_table)

    @property
    def extent(self):
        return np.asarray(self.dims) * self.voxel_size

    def occupancy_fraction(self):
        return float((self.labels != 0).mean())


def generate_scene(seed, dims=(64, 64, 16), num_classes=6, voxel_size=0.2):
    """Procedural driving scene: ground with a road corridor along +x,
    buildings flanking it, cars on the road, vegetation on the verges.

    Classes appear cumulatively with num_classes: 2 adds the ground (road),
    3 splits in terrain, 4 adds buildings, 5 cars, 6 vegetation.
    """
    X, Y, Z = dims
    if X < 32 or Y < 32 or Z < 8:
        raise ValueError(f"dims {dims} too small to place the road (need >= (32,32,8))")
    if not 2 <= num_classes <= len(CLASS_TABLE):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_TABLE)}]")
    rng = rng_for(seed, "scene")
    labels = np.zeros(dims, dtype=np.uint8)

    ground_layers = 2
    road_hw = max(8, Y // 5)
    yc = Y // 2
    road_lo, road_hi = yc - road_hw, yc + road_hw  # half-open [lo, hi)

    # ground slab covers the full footprint; road corridor runs along x
    labels[:, :, :ground_layers] = 2 if num_classes >= 3 else 1
    labels[:, road_lo:road_hi, :ground_layers] = 1

    if num_classes >= 4:
        # buildings on both verges, leaving a sidewalk gap beside the road
        for side in (-1, 1):
            x = int(rng.integers(0, 6))
            while x < X - 8:
                length = int(rng.integers(8, 18))
                depth = int(rng.integers(6, 12))
                height = int(rng.integers(Z // 2, Z - 2))
                gap = int(rng.integers(2, 8))
                if side < 0:
                    y0 = max(0, road_lo - 3 - depth)
                    y1 = road_lo - 3
                else:
                    y0 = road_hi + 3
                    y1 = min(Y, road_hi + 3 + depth)
                if y1 > y0:
                    labels[x : min(x + length, X), y0:y1, ground_layers : ground_layers + height] = 3
                x += length + gap

    if num_classes >= 5:
        # cars keep the center lane clear so the rig can drive through
        n_cars = int(rng.integers(2, 7))
        car_h = max(4, int(round(1.4 / voxel_size)))
        max_width = 2 * ((road_hw - 4) // 2) + 1  # keeps the center lane clear
        for _ in range(n_cars):
            length = int(rng.integers(12, 19))
            width = min(int(rng.integers(7, 10)), max_width)
            lane = int(rng.integers(width // 2 + 3, road_hw - width // 2))
            side = int(rng.choice([-1, 1]))
            cy = yc + side * lane
            cx = int(rng.integers(0, max(1, X - length)))
            labels[
                cx : cx + length,
                cy - width // 2 : cy + (width + 1) // 2,
                ground_layers : ground_layers + car_h,
            ] = 4

    if num_classes >= 6:
        # vegetation blobs on the terrain verges
        n_veg = int(rng.integers(4, 9))
        gx, gy, gz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
        for _ in range(n_veg):
            r = int(rng.integers(2, 5))
            side = int(rng.choice([-1, 1]))
            cy = yc + side * int(rng.integers(road_hw + 2, max(road_hw + 3, Y // 2 - 2)))
            cx = int(rng.integers(r, X - r))
            cz = ground_layers + r
            if not 0 <= cy < Y:
                continue
            blob = (gx - cx) ** 2 + (gy - cy) ** 2 + (gz - cz) ** 2 <= r * r
            labels[blob & (labels == 0)] = 5

    table = CLASS_TABLE[:num_classes]
    meta = {
        "ground_layers": ground_layers,
        "road_y_lo": road_lo,
        "road_y_hi": road_hi,
        "road_center_y": yc,
    }
    return VoxelWorld(
        dims=tuple(dims),
        voxel_size=float(voxel_size),
        origin=np.zeros(3),
        labels=labels,
        class_table=table,
        seed=int(seed),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Rig and trajectory


@dataclass(frozen=True)
class RigCamera:
    name: str
    intrinsics: Intrinsics
    mount: Pose  # vehicle-from-camera


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple  # of RigCamera

    @property
    def names(self):
        return tuple(c.name for c in self.cameras)

    def camera(self, name):
        for c in self.cameras:
            if c.name == name:
                return c
        raise KeyError(name)

    def world_pose(self, vehicle_pose, name):
        return vehicle_pose.compose(self.camera(name).mount)


# camera axes (+x right, +y down, +z forward) expressed in the vehicle frame
# (+x forward, +y left, +z up)
_R_FORWARD = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
_R_LEFT = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
_R_RIGHT = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]])


def default_rig(width=64, height=48, front_fov=70.0, side_fov=100.0, baseline=0.6):
    front = intrinsics_from_fov(front_fov, width, height)
    side = intrinsics_from_fov(side_fov, width, height)
    half = baseline / 2.0
    return CameraRig(
        cameras=(
            RigCamera("front_left", front, Pose.from_rt(_R_FORWARD, [0.3, half, 0.0])),
            RigCamera("front_right", front, Pose.from_rt(_R_FORWARD, [0.3, -half, 0.0])),
            RigCamera("side_left", side, Pose.from_rt(_R_LEFT, [0.0, 0.35, 0.0])),
            RigCamera("side_right", side, Pose.from_rt(_R_RIGHT, [0.0, -0.35, 0.0])),
        )
    )


def trajectory(world, num_steps, speed=1.0, camera_height=1.6, yaw_noise=0.03):
    """Vehicle poses driving the road corridor in +x at `speed` voxels/step.

    Displacement per step is exactly constant; the noise is yaw-only, so
    heading wobbles while the track stays straight.  speed 0 returns
    identical poses.
    """
    vs = world.voxel_size
    yc_world = world.origin[1] + (world.meta["road_center_y"] + 0.5) * vs
    ground_top = world.origin[2] + world.meta["ground_layers"] * vs
    z = ground_top + camera_height
    x0 = world.origin[0] + 2 * vs
    dx = speed * vs

    if speed == 0:
        yaws = np.zeros(num_steps)
    else:
        rng = rng_for(world.seed, "trajectory")
        raw = rng.uniform(-1.0, 1.0, num_steps)
        # short moving average keeps heading changes smooth
        k = np.ones(3) / 3.0
        yaws = yaw_noise * np.convolve(raw, k, mode="same")

    poses = []
    for t in range(num_steps):
        c, s = np.cos(yaws[t]), np.sin(yaws[t])
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        poses.append(Pose.from_rt(R, [x0 + t * dx, yc_world, z]))

    lo = world.origin
    hi = world.origin + world.extent
    for p in poses:
        if np.any(p.t < lo) or np.any(p.t >= hi):
            raise ValueError(f"trajectory exits world bounds at {p.t}")
    return poses


# ---------------------------------------------------------------------------
# Exact ray casting


def dda_raycast(world, origins, dirs):
    """First-hit traversal of the voxel grid for a batch of rays.

    origins/dirs: (N, 3), dirs unit.  Returns (hit, dist, cls, normal):
    hit flags, Euclidean distance to the entry face of the first occupied
    voxel, its class id, and the entry-face outward normal (for rays born
    inside an occupied voxel the normal falls back to -dir).

    Boundary crossing distances are recomputed from integer boundary indices
    at every step rather than accumulated, so axis-aligned hits are exact.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    vs = world.voxel_size
    dims = np.asarray(world.dims)
    o = origins - world.origin  # meters, grid-local
    d = dirs

    # slab test against the grid box
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (0.0 - o) / d
        t2 = (dims * vs - o) / d
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    # a zero direction component misses unless the origin is inside that slab
    inside_slab = (o >= 0.0) & (o <= dims * vs)
    tlo = np.where((d == 0.0) & inside_slab, -np.inf, tlo)
    thi = np.where((d == 0.0) & inside_slab, np.inf, thi)
    tlo = np.where((d == 0.0) & ~inside_slab, np.inf, tlo)
    thi = np.where((d == 0.0) & ~inside_slab, -np.inf, thi)
    t_enter = tlo.max(axis=1)
    t_exit = thi.min(axis=1)
    enter_axis = tlo.argmax(axis=1)
    started_inside = t_enter <= 0.0
    t_enter = np.maximum(t_enter, 0.0)
    reach = (t_enter <= t_exit) & (t_exit > 0.0)

    p0 = o + (t_enter[:, None] + 1e-9) * d
    ix = np.clip(np.floor(p0 / vs).astype(np.int64), 0, dims - 1)
    step = np.sign(d).astype(np.int64)

    def boundary_t(rays, axis):
        # distance to the next boundary plane of `axis` given current cell
        nb = ix[rays, axis] + (step[rays, axis] > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (nb * vs - o[rays, axis]) / d[rays, axis]
        return np.where(step[rays, axis] == 0, np.inf, t)

    all_rays = np.arange(n)
    t_next = np.stack([boundary_t(all_rays, a) for a in range(3)], axis=1)

    hit = np.zeros(n, dtype=bool)
    dist = np.zeros(n)
    cls = np.zeros(n, dtype=np.uint8)
    normal = np.zeros((n, 3))
    t_cur = t_enter.copy()
    norm_axis = np.where(started_inside, -1, enter_axis)
    active = reach.copy()

    for _ in range(int(dims.sum()) + 3):
        if not active.any():
            break
        ai = np.flatnonzero(active)
        lab = world.labels[ix[ai, 0], ix[ai, 1], ix[ai, 2]]
        h = lab != 0
        if h.any():
            hi_idx = ai[h]
            hit[hi_idx] = True
            dist[hi_idx] = t_cur[hi_idx]
            cls[hi_idx] = lab[h]
            for axis in range(3):
                sel = hi_idx[norm_axis[hi_idx] == axis]
                normal[sel, axis] = -step[sel, axis]
            inside = hi_idx[norm_axis[hi_idx] < 0]
            normal[inside] = -d[inside]
            active[hi_idx] = False
            ai = np.flatnonzero(active)
            if ai.size == 0:
                break
        a_min = t_next[ai].argmin(axis=1)
        t_cur[ai] = t_next[ai, a_min]
        ix[ai, a_min] += step[ai, a_min]
        oob = (ix[ai, a_min] < 0) | (ix[ai, a_min] >= dims[a_min])
        active[ai[oob]] = False
        ai = ai[~oob]
        a_min = a_min[~oob]
        norm_axis[ai] = a_min
        for axis in range(3):
            sel = ai[a_min == axis]
            t_next[sel, axis] = boundary_t(sel, axis)

    return hit, dist, cls, normal


# ---------------------------------------------------------------------------
# Ground-truth rendering


@dataclass
class Frame:
    image: np.ndarray  # H x W x 3 in [0,1]
    seg: np.ndarray  # H x W uint8 pseudo-labels (corrupted)
    gt_seg: np.ndarray  # H x W uint8 exact labels
    gt_depth: np.ndarray  # H x W z-depth, meters; 0 where no hit
    gt_dist: np.ndarray  # H x W Euclidean ray distance, meters; 0 where no hit
    intrinsics: Intrinsics
    pose: Pose  # world-from-camera
    cam: str = ""
    timestep: int = 0


def gt_render(world, intr, pose, cam="", timestep=0):
    """Exact render: per-pixel traversal, Lambert-shaded class albedos."""
    gx, gy = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    uv = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    rays = pixel_ray(intr, pose, uv)
    hit, dist, cls, normal = dda_raycast(world, rays.origin, rays.direction)

    albedo = np.array([c[1] for c in world.class_table])
    shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, normal @ (-LIGHT_DIR))
    img = albedo[cls] * shade[:, None]
    img[~hit] = albedo[0]

    zscale = rays.direction @ pose.R[:, 2]
    h, w = intr.height, intr.width
    frame = Frame(
        image=img.reshape(h, w, 3),
        seg=np.where(hit, cls, 0).astype(np.uint8).reshape(h, w),
        gt_seg=np.where(hit, cls, 0).astype(np.uint8).reshape(h, w),
        gt_depth=np.where(hit, dist * zscale, 0.0).reshape(h, w),
        gt_dist=np.where(hit, dist, 0.0).reshape(h, w),
        intrinsics=intr,
        pose=pose,
        cam=cam,
        timestep=timestep,
    )
    return frame


# ---------------------------------------------------------------------------
# Pseudo-label corruption (the segmentation-network surrogate)


@dataclass(frozen=True)
class NoiseConfig:
    jitter_radius: float = 2.0  # max boundary displacement, px
    flip_rate: float = 0.02  # per-block probability of a class flip
    block_size: int = 6


def corrupt_labels(gt_seg, seed, noise=NoiseConfig(), num_classes=6):
    """Degrade exact labels into plausible network output.

    A smooth random displacement field (bounded by jitter_radius) warps class
    boundaries; then whole blocks flip to a random semantic class with
    probability flip_rate.  Background pixels never flip.  Deterministic in
    (seed, noise).
    """
    gt_seg = np.asarray(gt_seg)
    h, w = gt_seg.shape
    rng = rng_for(seed, "labels")
    out = gt_seg.copy()

    r = noise.jitter_radius
    if r > 0:
        gh, gw = max(2, h // 8), max(2, w // 8)
        coarse = rng.uniform(-1.0, 1.0, (2, gh, gw))
        yy = np.linspace(0, gh - 1, h)
        xx = np.linspace(0, gw - 1, w)
        y0 = np.floor(yy).astype(int)
        x0 = np.floor(xx).astype(int)
        y1 = np.minimum(y0 + 1, gh - 1)
        x1 = np.minimum(x0 + 1, gw - 1)
        fy = (yy - y0)[:, None]
        fx = (xx - x0)[None, :]
        disp = []
        for c in coarse:
            v = (
                c[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
                + c[np.ix_(y0, x1)] * (1 - fy) * fx
                + c[np.ix_(y1, x0)] * fy * (1 - fx)
                + c[np.ix_(y1, x1)] * fy * fx
            )
            # smooth drift plus per-pixel flicker, capped at the radius
            v = v * r + rng.uniform(-1.2 * r, 1.2 * r, (h, w))
            disp.append(np.clip(v, -r, r))
        dy, dx = disp
        ys = np.clip(np.round(np.arange(h)[:, None] + dy), 0, h - 1).astype(int)
        xs = np.clip(np.round(np.arange(w)[None, :] + dx), 0, w - 1).astype(int)
        out = out[ys, xs]

    p = noise.flip_rate
    if p > 0:
        b = noise.block_size
        nby, nbx = -(-h // b), -(-w // b)
        flips = rng.uniform(size=(nby, nbx)) < p
        targets = rng.integers(1, num_classes, size=(nby, nbx))
        flip_map = np.kron(flips, np.ones((b, b), dtype=bool))[:h, :w]
        target_map = np.kron(targets, np.ones((b, b), dtype=np.int64))[:h, :w]
        sel = flip_map & (out != 0)
        out = np.where(sel, target_map, out).astype(np.uint8)
    return out


def label_agreement(seg, gt_seg):
    """Fraction of non-background gt pixels carrying the gt class."""
    m = gt_seg != 0
    if not m.any():
        return 1.0
    return float((seg[m] == gt_seg[m]).mean())


# ---------------------------------------------------------------------------
# Dataset assembly


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    dims: tuple = (64, 64, 16)
    num_classes: int = 6
    voxel_size: float = 0.2
    image_width: int = 64
    image_height: int = 48
    num_steps: int = 40
    speed: float = 1.0
    front_fov: float = 70.0
    side_fov: float = 100.0
    baseline: float = 0.6
    camera_height: float = 1.6
    noise: NoiseConfig = NoiseConfig()

    def to_dict(self):
        d = {
            "seed": self.seed,
            "dims": list(self.dims),
            "num_classes": self.num_classes,
            "voxel_size": self.voxel_size,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "num_steps": self.num_steps,
            "speed": self.speed,
            "front_fov": self.front_fov,
            "side_fov": self.side_fov,
            "baseline": self.baseline,
            "camera_height": self.camera_height,
            "noise": {
                "jitter_radius": self.noise.jitter_radius,
                "flip_rate": self.noise.flip_rate,
                "block_size": self.noise.block_size,
            },
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "noise" in d:
            d["noise"] = NoiseConfig(**d["noise"])
        if "dims" in d:
            d["dims"] = tuple(d["dims"])
        return cls(**d)


class Dataset:
    """Scene + rig + trajectory with lazily rendered, cached frames."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.world = generate_scene(cfg.seed, cfg.dims, cfg.num_classes, cfg.voxel_size)
        self.rig = default_rig(cfg.image_width, cfg.image_height, cfg.front_fov, cfg.side_fov, cfg.baseline)
        self.poses = trajectory(self.world, cfg.num_steps, cfg.speed, cfg.camera_height)
        self._cache = {}

    @property
    def num_steps(self):
        return self.cfg.num_steps

    def frame(self, t, cam):
        key = (t, cam)
        if key not in self._cache:
            rigcam = self.rig.camera(cam)
            pose = self.rig.world_pose(self.poses[t], cam)
            f = gt_render(self.world, rigcam.intrinsics, pose, cam=cam, timestep=t)
            f.seg = corrupt_labels(
                f.gt_seg,
                seed=f"{self.cfg.seed}/{t}/{cam}",
                noise=self.cfg.noise,
                num_classes=self.cfg.num_classes,
            )
            self._cache[key] = f
        return self._cache[key]

    def scene_manifest(self):
        rig = []
        for c in self.rig.cameras:
            rig.append(
                {
                    "name": c.name,
                    "intrinsics": c.intrinsics.to_dict(),
                    "mount": [list(map(float, row)) for row in c.mount.T],
                }
            )
        return {
            "config": self.cfg.to_dict(),
            "world": {
                "dims": list(self.world.dims),
                "voxel_size": self.world.voxel_size,
                "origin": [float(v) for v in self.world.origin],
                "classes": [{"id": i, "name": n, "albedo": list(a)} for i, (n, a) in enumerate(self.world.class_table)],
                "occupancy_fraction": self.world.occupancy_fraction(),
            },
            "rig": rig,
            "vehicle_poses": [[list(map(float, row)) for row in p.T] for p in self.poses],
        }
