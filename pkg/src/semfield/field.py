"""The implicit semantic field.

An input image induces a pixel-aligned feature map (either a directly
learnable map for single-scene fits, or a small conv encoder-decoder).  A 3D
point is answered by projecting it into the input view, bilinearly sampling
the feature map, and decoding density and class logits with two tiny MLPs fed
the feature plus positional encodings of the point's camera distance and
pixel position.  The field stores no color.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .camera import PosEncConfig, normalize_unit, posenc, project
from .scenesim import rng_for


@dataclass(frozen=True)
class FieldConfig:
    feature_dim: int = 64
    num_classes: int = 6
    num_frequencies: int = 6
    hidden_dim: int = 64
    num_hidden_layers: int = 2
    encoder_mode: str = "per_image"  # or "conv"
    image_width: int = 64
    image_height: int = 48
    z_near: float = 0.5
    z_far: float = 14.0
    init_sigma: float = 0.05

    def __post_init__(self):
        if self.encoder_mode not in ("per_image", "conv"):
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")
        if not 0 < self.z_near < self.z_far:
            raise ValueError("need 0 < z_near < z_far")

    @property
    def posenc_cfg(self):
        return PosEncConfig(self.num_frequencies)

    @property
    def mlp_in_dim(self):
        # feature + gamma(d) + gamma(u_x), gamma(u_y)
        return self.feature_dim + 2 * self.num_frequencies + 4 * self.num_frequencies

    def to_dict(self):
        return {
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "num_frequencies": self.num_frequencies,
            "hidden_dim": self.hidden_dim,
            "num_hidden_layers": self.num_hidden_layers,
            "encoder_mode": self.encoder_mode,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "z_near": self.z_near,
            "z_far": self.z_far,
            "init_sigma": self.init_sigma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FieldSample:
    sigma: float
    logits: np.ndarray
    valid: bool


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _mlp_param_arrays(rng, in_dim, hidden, out_dim, n_hidden):
    sizes = [in_dim] + [hidden] * n_hidden + [out_dim]
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"w{i}"] = _fan_in_uniform(rng, (a, b), a)
        out[f"b{i}"] = _fan_in_uniform(rng, (1, b), a)
    return out


class SemanticFieldModel:
    """Field parameters plus the query pipeline."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.params = {}
        rng = rng_for(seed, "field-init")
        c = cfg.feature_dim
        n_lay = cfg.num_hidden_layers
        for name, out_dim in (("phi_D", 1), ("phi_S", cfg.num_classes)):
            for k, v in _mlp_param_arrays(rng, self.cfg.mlp_in_dim, cfg.hidden_dim, out_dim, n_lay).items():
                self.params[f"{name}.{k}"] = ad.param(v)
        # near-transparent start: softplus(bias) = init_sigma
        b_last = f"phi_D.b{n_lay}"
        self.params[b_last].data[:] = np.log(np.expm1(cfg.init_sigma))

        if cfg.encoder_mode == "per_image":
            self.params["fmap"] = ad.param(np.zeros((cfg.image_height, cfg.image_width, c)))
        else:
            ch = [3, 16, 32, 64]
            for i in range(3):
                self.params[f"enc.w{i}"] = ad.param(
                    _fan_in_uniform(rng, (ch[i + 1], ch[i], 3, 3), ch[i] * 9)
                )
                self.params[f"enc.b{i}"] = ad.param(np.zeros((1, ch[i + 1], 1, 1)))
            dec = [(32, 64 + 32), (16, 32 + 16), (c, 16 + 3)]
            for i, (co, ci) in enumerate(dec):
                self.params[f"dec.w{i}"] = ad.param(_fan_in_uniform(rng, (co, ci, 3, 3), ci * 9))
                self.params[f"dec.b{i}"] = ad.param(np.zeros((1, co, 1, 1)))

    # -- persistence ------------------------------------------------------

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k} in state")
            p.data = np.asarray(arrays[k], dtype=p.data.dtype).reshape(p.data.shape).copy()
            p.grad = None

    # -- encoding ---------------------------------------------------------

    def encode(self, image=None):
        """Feature map (H, W, C) Tensor for the input image.

        per_image mode ignores pixel values and returns the learnable map;
        conv mode runs the encoder-decoder (needs H, W divisible by 8).
        """
        cfg = self.cfg
        if cfg.encoder_mode == "per_image":
            return self.params["fmap"]
        if image is None:
            raise ValueError("conv mode needs the input image")
        image = np.asarray(image)
        h, w = image.shape[:2]
        if (h, w) != (cfg.image_height, cfg.image_width):
            raise ValueError(f"image {h}x{w} does not match config {cfg.image_height}x{cfg.image_width}")
        if h % 8 or w % 8:
            raise ValueError("conv mode needs image dims divisible by 8")
        x = ad.constant(image.transpose(2, 0, 1)[None])  # 1,3,H,W
        acts = [x]
        for i in range(3):
            conv = ad.conv2d(acts[-1], self.params[f"enc.w{i}"], stride=2, padding=1)
            acts.append(ad.relu(conv + self.params[f"enc.b{i}"]))
        y = acts[3]
        for i, skip in enumerate((acts[2], acts[1], acts[0])):
            y = ad.concat([ad.upsample2x(y), skip], axis=1)
            y = ad.conv2d(y, self.params[f"dec.w{i}"], stride=1, padding=1) + self.params[f"dec.b{i}"]
            if i < 2:
                y = ad.relu(y)
        # 1,C,H,W -> H,W,C
        return ad.transpose(ad.reshape(y, (cfg.feature_dim, h, w)), (1, 2, 0))

    # -- queries ----------------------------------------------------------

    def query_batch(self, fmap, input_intr, input_pose, xs, logit_rows=None):
        """Decode density and logits at points (N, 3).

        Returns (sigma Tensor (N,), logits Tensor (M, c), valid bool (N,)).
        Points outside the input frustum (behind the camera or off the image
        footprint) are masked to sigma=0, logits=0, valid=False.

        ``logit_rows`` optionally restricts the semantic head to a subset of
        the points (integer index array into xs); density is always decoded
        for all points.  M == N when logit_rows is None, else len(logit_rows).
        The class head costs as much as the density head, so callers that
        only need logits on a fraction of the batch save real time here.
        """
        cfg = self.cfg
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        uv, z, in_view = project(input_intr, input_pose, xs)
        valid = in_view  # z > 0 and inside the footprint
        uv_s = np.clip(uv, 0.0, [input_intr.width - 1, input_intr.height - 1])
        f_u = ad.bilinear_sample(fmap, uv_s)

        dd = ad.get_default_dtype()
        dist = np.linalg.norm(xs - input_pose.t, axis=1)
        g_d = posenc(normalize_unit(dist, cfg.z_near, cfg.z_far).astype(dd), cfg.posenc_cfg)
        g_ux = posenc(normalize_unit(uv_s[:, 0], 0.0, input_intr.width - 1.0).astype(dd), cfg.posenc_cfg)
        g_uy = posenc(normalize_unit(uv_s[:, 1], 0.0, input_intr.height - 1.0).astype(dd), cfg.posenc_cfg)
        inp = ad.concat([f_u, ad.constant(np.concatenate([g_d, g_ux, g_uy], axis=1))], axis=1)

        mask = ad.constant(valid.astype(dd)[:, None])
        sigma = ad.softplus(self._mlp("phi_D", inp)) * mask
        if logit_rows is None:
            logits = self._mlp("phi_S", inp) * mask
        else:
            # A slice keeps getitem on the cheap view path; index arrays work too.
            rows = logit_rows if isinstance(logit_rows, slice) else np.asarray(logit_rows, dtype=np.int64)
            sub_mask = ad.constant(valid[rows].astype(dd)[:, None])
            logits = self._mlp("phi_S", ad.getitem(inp, rows)) * sub_mask
        return ad.reshape(sigma, (xs.shape[0],)), logits, valid

    def query(self, fmap, input_intr, input_pose, x):
        with_sigma, logits, valid = self.query_batch(fmap, input_intr, input_pose, np.asarray(x)[None])
        return FieldSample(
            sigma=float(with_sigma.data[0]),
            logits=logits.data[0].copy(),
            valid=bool(valid[0]),
        )

    def _mlp(self, prefix, x):
        n = self.cfg.num_hidden_layers
        for i in range(n + 1):
            x = ad.matmul(x, self.params[f"{prefix}.w{i}"]) + self.params[f"{prefix}.b{i}"]
            if i < n:
                x = ad.relu(x)
        return x
