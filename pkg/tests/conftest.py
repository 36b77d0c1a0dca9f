import numpy as np
import pytest

from semfield import autodiff as ad
from semfield import scenesim as sim


class _StubCfg:
    def __init__(self, num_classes):
        self.num_classes = num_classes


class OracleField:
    """Field stub backed directly by a voxel grid.

    Opaque (sigma = hard) inside occupied voxels, empty elsewhere; logits are
    a scaled one-hot of the voxel label.  Lets rendering be tested against
    exact ray-cast ground truth without fitting anything.
    """

    def __init__(self, world, hard=1e4, logit_scale=20.0):
        self.world = world
        self.hard = hard
        self.logit_scale = logit_scale
        self.cfg = _StubCfg(world.num_classes)

    def lookup(self, xs):
        w = self.world
        ix = np.floor((np.asarray(xs) - w.origin) / w.voxel_size).astype(np.int64)
        inside = np.all((ix >= 0) & (ix < np.asarray(w.dims)), axis=1)
        lab = np.zeros(len(ix), dtype=np.int64)
        ii = ix[inside]
        lab[inside] = w.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
        return lab

    def query_batch(self, fmap, intr, pose, xs):
        xs = np.asarray(xs).reshape(-1, 3)
        lab = self.lookup(xs)
        sigma = np.where(lab > 0, self.hard, 0.0)
        logits = np.zeros((len(xs), self.cfg.num_classes))
        logits[np.arange(len(xs)), lab] = self.logit_scale
        valid = np.ones(len(xs), dtype=bool)
        return ad.constant(sigma), ad.constant(logits), valid


@pytest.fixture(scope="session")
def small_world():
    return sim.generate_scene(0, dims=(48, 48, 12), num_classes=6, voxel_size=0.2)


@pytest.fixture(scope="session")
def small_rig():
    return sim.default_rig(width=48, height=36)
