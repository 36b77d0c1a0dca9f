"""Reverse-mode automatic differentiation over dense numpy arrays.

A small tape-based engine: ops compute forward with numpy and, when a tape
is active and any input requires gradients, push a node holding a backward
closure.  The tape is an execution-ordered list, so reverse iteration is a
valid reverse-topological traversal.

Two float modes: float64 for verification (finite-difference checks are
unreliable at float32) and float32 for training.  Switch with
:func:`set_default_dtype`; tensors remember the dtype they were created with.

Every op checks its output for NaN/Inf and raises ``NonFiniteError`` --
non-finite values are treated as an error state, not something to propagate.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: backward on empty/consumed tape, non-scalar loss."""


def set_default_dtype(dtype):
    """Set the dtype new tensors are created with (np.float32 or np.float64)."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype


def get_default_dtype():
    return DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype."""
    prev = DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """Dense array with optional gradient buffer.

    ``data`` is always a numpy array of the module float dtype; ``grad`` is
    None until backward() accumulates into it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators -> module ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    # unary / reduction methods
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return absval(self)

    def softplus(self):
        return softplus(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def min(self, axis=None):
        return tmin(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def param(data):
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def constant(data):
    return Tensor(data, requires_grad=False)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class TapeNode:
    out: Tensor
    inputs: tuple
    backward: object  # callable grad_out -> tuple of grads (or None) per input
    name: str


@dataclass
class Tape:
    """Execution-ordered op record for one fitting batch."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False

    def backward(self, loss):
        """Propagate d(loss)/d(tensor) into .grad of every recorded tensor.

        Accumulation is additive: a tensor used twice receives the sum of both
        paths.  Each node is visited exactly once, in reverse execution order.
        """
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if not self.nodes:
            raise TapeError("backward on an empty tape")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise TapeError("loss must be a scalar Tensor")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            borrowed = False
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    # First write: take ownership of the array when that is
                    # safe, copy otherwise.  The upstream buffer g may be
                    # borrowed by at most one input per node; the tape visits
                    # consumers before producers, so a borrowed buffer only
                    # ever has one live holder and later in-place accumulation
                    # cannot corrupt a gradient that is still needed.  (After
                    # backward() the .grad of interior tensors may therefore
                    # share storage; leaf gradients are always correct.)
                    if gi.dtype != inp.data.dtype:
                        inp.grad = gi.astype(inp.data.dtype)
                    elif gi is g:
                        if borrowed:
                            inp.grad = gi.copy()
                        else:
                            inp.grad = gi
                            borrowed = True
                    elif gi.base is not None:
                        inp.grad = gi.copy()
                    else:
                        inp.grad = gi
                else:
                    inp.grad += gi


_TAPE_STACK: list = []
_NO_GRAD_DEPTH = 0


def _push_tape(t):
    _TAPE_STACK.append(t)


def _pop_tape(t):
    if not _TAPE_STACK or _TAPE_STACK[-1] is not t:
        raise TapeError("tape stack corrupted")
    _TAPE_STACK.pop()


def active_tape():
    if _NO_GRAD_DEPTH > 0 or not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


@contextmanager
def no_grad():
    """Disable recording; forward values only."""
    global _NO_GRAD_DEPTH
    _NO_GRAD_DEPTH += 1
    try:
        yield
    finally:
        _NO_GRAD_DEPTH -= 1


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")
    return arr


def _record(name, out_data, inputs, backward):
    """Finalize an op: finite-check, wrap, and push a tape node if needed."""
    _check_finite(out_data, name)
    out = Tensor(out_data, dtype=out_data.dtype)
    t = active_tape()
    if t is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        t.nodes.append(TapeNode(out, tuple(inputs), backward, name))
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_check(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_check(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_check(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_check(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _binary_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", out, (a, b), bwd)


def neg(a):
    out = -a.data
    return _record("neg", out, (a,), lambda g: (-g,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")

    def bwd(g):
        return (g * out,)

    return _record("exp", out, (a,), bwd)


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite(out, "log")

    def bwd(g):
        return (g / a.data,)

    return _record("log", out, (a,), bwd)


def relu(a):
    out = np.maximum(a.data, 0.0)
    mask = (a.data > 0.0).astype(a.data.dtype)

    def bwd(g):
        return (g * mask,)

    return _record("relu", out, (a,), bwd)


def softplus(a):
    # log(1 + e^x), computed stably; derivative is the logistic function
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return (g * sig,)

    return _record("softplus", out, (a,), bwd)


def absval(a):
    out = np.abs(a.data)

    def bwd(g):
        return (g * np.sign(a.data),)

    return _record("abs", out, (a,), bwd)


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes where the input lies inside (inclusive)."""
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def bwd(g):
        return (g * mask,)

    return _record("clamp", out, (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra and structure


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), bwd)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record("reshape", out, (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _record("transpose", out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), bwd)


def _is_basic_key(key):
    """Basic indexing (ints/slices) never aliases, so += beats np.add.at."""
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None))) for p in parts)


def getitem(a, key):
    out = a.data[key]
    basic = _is_basic_key(key)

    def bwd(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return _record("getitem", np.asarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# Reductions


def tsum(a, axis=None):
    out = np.asarray(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", out, (a,), bwd)


def tmean(a, axis=None):
    out = np.asarray(a.data.mean(axis=axis))
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _record("mean", out, (a,), bwd)


def tmin(a, axis):
    """Minimum along an axis; gradient routes to the first argmin (tie-break)."""
    out = a.data.min(axis=axis)
    idx = np.expand_dims(a.data.argmin(axis=axis), axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis)
        return (ga,)

    return _record("min", out, (a,), bwd)


def softmax(a):
    """Softmax over the last axis, applied per row."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), bwd)


def exclusive_cumsum(a, axis=-1):
    """y_i = sum of x_j for j < i along axis (y_0 = 0)."""
    x = a.data
    y = np.cumsum(x, axis=axis)
    out = np.roll(y, 1, axis=axis)
    sl = [slice(None)] * x.ndim
    sl[axis] = 0
    out[tuple(sl)] = 0.0

    def bwd(g):
        # dL/dx_j = sum of g_i for i > j: reversed exclusive cumsum
        gr = np.flip(g, axis=axis)
        s = np.roll(np.cumsum(gr, axis=axis), 1, axis=axis)
        s[tuple(sl)] = 0.0
        return (np.flip(s, axis=axis),)

    return _record("exclusive_cumsum", out, (a,), bwd)


# ---------------------------------------------------------------------------
# Spatial ops (NCHW)


def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return cols, oh, ow


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation, NCHW input with an OIHW kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input/kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d: padded input smaller than kernel")
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    out = np.einsum("nchwyx,ochw->noyx", cols, w.data, optimize=True)

    def bwd(g):
        gw = np.einsum("nchwyx,noyx->ochw", cols, g, optimize=True)
        gx_p = np.zeros_like(xp)
        # scatter g * w back over the input windows, one kernel offset at a time
        for i in range(kh):
            for j in range(kw):
                patch = np.einsum("noyx,oc->ncyx", g, w.data[:, :, i, j], optimize=True)
                gx_p[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += patch
        if padding:
            gx = gx_p[:, :, padding:-padding, padding:-padding]
        else:
            gx = gx_p
        return gx, gw

    return _record("conv2d", out, (x, w), bwd)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x needs NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _record("upsample2x", out, (x,), bwd)


def pad2d_replicate(x, p):
    """Replicate-pad the last two axes of an NCHW tensor by p pixels."""
    if x.ndim != 4:
        raise ShapeError(f"pad2d_replicate needs NCHW input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    iy = np.clip(np.arange(-p, h + p), 0, h - 1)
    ix = np.clip(np.arange(-p, w + p), 0, w - 1)
    out = x.data[:, :, iy][:, :, :, ix]

    def bwd(g):
        gy = np.zeros((g.shape[0], g.shape[1], h, g.shape[3]), dtype=g.dtype)
        np.add.at(gy.transpose(2, 0, 1, 3), iy, g.transpose(2, 0, 1, 3))
        gx = np.zeros((g.shape[0], g.shape[1], h, w), dtype=g.dtype)
        np.add.at(gx.transpose(3, 0, 1, 2), ix, gy.transpose(3, 0, 1, 2))
        return (gx,)

    return _record("pad2d_replicate", out, (x,), bwd)


def bilinear_sample(fmap, coords):
    """Sample an H x W x C map at continuous pixel coords (N x 2, (x, y) order).

    Pixel centers sit at integer coordinates; coords are border-clamped before
    interpolation.  Differentiable w.r.t. the map only -- coordinates are
    treated as constants (in this system sample positions never depend on
    learnable parameters).
    """
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample needs an HWC map, got {fmap.shape}")
    coords = np.asarray(coords, dtype=fmap.data.dtype)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bilinear_sample coords must be N x 2, got {coords.shape}")
    h, w, c = fmap.shape
    x = np.clip(coords[:, 0], 0.0, w - 1.0)
    y = np.clip(coords[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0).reshape(-1, 1)
    fy = (y - y0).reshape(-1, 1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    flat = fmap.data.reshape(h * w, c)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    out = w00 * flat[i00] + w01 * flat[i01] + w10 * flat[i10] + w11 * flat[i11]

    def bwd(g):
        n = coords.shape[0]
        rows = np.concatenate([np.arange(n)] * 4)
        cols_idx = np.concatenate([i00, i01, i10, i11])
        vals = np.concatenate([w00, w01, w10, w11]).ravel()
        s = sp.csr_matrix((vals, (rows, cols_idx)), shape=(n, h * w))
        gf = (s.T @ g).reshape(h, w, c)
        return (np.asarray(gf),)

    return _record("bilinear_sample", out, (fmap,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class CheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class CheckReport:
    entries: list
    tol: float

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def failures(self):
        return [e for e in self.entries if not e.passed]

    def __str__(self):
        lines = [f"{'PASS' if e.passed else 'FAIL'}  {e.name:30s} max_rel_err={e.max_rel_err:.3e}" for e in self.entries]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tol={self.tol:g})")
        return "\n".join(lines)


def _rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(fn, params, h=1e-6, tol=1e-5, max_entries=None, seed=0):
    """Compare analytic gradients of a scalar program against central differences.

    ``fn()`` must rebuild the computation from ``params`` (a dict name -> Tensor)
    and return a scalar Tensor; it must be deterministic, which is verified by
    running the forward pass twice.  For large parameters, ``max_entries``
    limits the finite-difference probe to a deterministic random subset of
    components.
    """
    with Tape() as t:
        loss = fn()
    v1 = loss.item()
    with no_grad():
        v2 = fn().item()
    if v1 != v2:
        raise TapeError("grad_check: fn is non-deterministic (two forward passes differ)")
    for p in params.values():
        p.zero_grad()
    t.backward(loss)

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = fn().item()
            flat[i] = orig - h
            with no_grad():
                fm = fn().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            an = analytic.reshape(-1)[i]
            if abs(fd) < 1e-10 and abs(an) < 1e-10:
                continue
            worst = max(worst, float(_rel_err(an, fd)))
        entries.append(CheckEntry(name, worst, worst <= tol))
    return CheckReport(entries, tol)


# Per-op finite-difference suite.  Each entry builds a small random scalar
# program exercising exactly one op, so a broken backward rule is reported
# under that op's name.


def _op_cases(rng):
    def r(*shape):
        return rng.standard_normal(shape)

    cases = {}
    cases["add"] = lambda p: (p["a"] + p["b"]).sum()
    cases["sub"] = lambda p: (p["a"] - p["b"]).sum()
    cases["mul"] = lambda p: (p["a"] * p["b"]).sum()
    cases["div"] = lambda p: (p["a"] / (p["b"].abs() + 1.5)).sum()
    cases["exp"] = lambda p: p["a"].exp().sum()
    cases["log"] = lambda p: (p["a"].abs() + 1.5).log().sum()
    cases["relu"] = lambda p: (p["a"].relu() * p["b"]).sum()
    cases["softplus"] = lambda p: p["a"].softplus().sum()
    cases["abs"] = lambda p: ((p["a"] + 0.3).abs() * p["b"]).sum()
    cases["clamp"] = lambda p: (p["a"].clamp(-0.7, 0.7) * p["b"]).sum()
    cases["matmul"] = lambda p: matmul(p["m1"], p["m2"]).sum()
    cases["softmax"] = lambda p: (softmax(p["a"]) * p["b"]).sum()
    cases["sum"] = lambda p: (p["a"].sum(axis=1) * p["r"]).sum()
    cases["mean"] = lambda p: (p["a"].mean(axis=0) * p["c"]).sum()
    cases["min"] = lambda p: (p["a"].min(axis=1) * p["r"]).sum()
    cases["concat"] = lambda p: (concat([p["a"], p["b"]], axis=1) * p["cc"]).sum()
    cases["reshape"] = lambda p: (p["a"].reshape(12) * p["f"]).sum()
    cases["transpose"] = lambda p: (p["a"].transpose((1, 0)) * p["t"]).sum()
    cases["getitem"] = lambda p: (p["a"][1:3, ::2] * p["gi"]).sum()
    cases["exclusive_cumsum"] = lambda p: (exclusive_cumsum(p["a"], axis=1) * p["cs"]).sum()
    cases["conv2d"] = lambda p: (conv2d(p["x4"], p["k"], stride=2, padding=1) * p["co"]).sum()
    cases["upsample2x"] = lambda p: (upsample2x(p["x4"]) * p["up"]).sum()
    cases["pad2d_replicate"] = lambda p: (pad2d_replicate(p["x4"], 1) * p["pd"]).sum()
    cases["bilinear_sample"] = lambda p: (bilinear_sample(p["fm"], p["uv"]) * p["bs"]).sum()

    params = {
        "a": param(r(3, 4)),
        "b": param(r(3, 4)),
        "m1": param(r(3, 5)),
        "m2": param(r(5, 2)),
        "r": constant(r(3)),
        "c": constant(r(4)),
        "cc": constant(r(3, 8)),
        "f": constant(r(12)),
        "t": constant(r(4, 3)),
        "gi": constant(r(2, 2)),
        "cs": constant(r(3, 4)),
        "x4": param(r(2, 3, 6, 6)),
        "k": param(r(2, 3, 3, 3)),
        "co": constant(r(2, 2, 3, 3)),
        "up": constant(r(2, 3, 12, 12)),
        "pd": constant(r(2, 3, 8, 8)),
        "fm": param(r(5, 7, 2)),
        "uv": np.column_stack([rng.uniform(-1, 7.5, 9), rng.uniform(-1, 5.5, 9)]),
        "bs": constant(r(9, 2)),
    }
    return cases, params


def check_registered_ops(h=1e-5, tol=1e-5, seed=0):
    """Finite-difference check every op's backward rule on random inputs.

    Returns a CheckReport with one entry per op name, so a deliberately broken
    rule shows up under the op that owns it.  h=1e-5 rather than 1e-6: these
    single-op losses are mostly (piecewise) linear, so the step error is nil
    while cancellation noise shrinks tenfold.
    """
    rng = np.random.default_rng(seed)
    cases, params = _op_cases(rng)
    entries = []
    for name, build in cases.items():
        grad_params = {k: v for k, v in params.items() if isinstance(v, Tensor) and v.requires_grad}
        rep = grad_check(lambda: build(params), grad_params, h=h, tol=tol)
        worst = max((e.max_rel_err for e in rep.entries), default=0.0)
        entries.append(CheckEntry(name, worst, worst <= tol))
    return CheckReport(entries, tol)
