"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class MissingGradError(RuntimeError):
    """optimizer step requested for a parameter that has no gradient."""


class Adam:
    """Adam with bias correction.

    ``params`` is a dict name -> Tensor; moment buffers are kept per name so
    they can round-trip through checkpoints.  step() consumes gradients
    (zeroes them) and increments the step counter.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self):
        """Moment buffers and step counter as named arrays for checkpointing."""
        out = {}
        for name in self.params:
            out[f"{name}.adam_m"] = self.m[name]
            out[f"{name}.adam_v"] = self.v[name]
        out["__step__"] = np.array([float(self.step_count)])
        return out

    def load_state_tensors(self, tensors):
        for name in self.params:
            km, kv = f"{name}.adam_m", f"{name}.adam_v"
            if km in tensors:
                self.m[name] = np.asarray(tensors[km], dtype=self.m[name].dtype).reshape(self.m[name].shape)
            if kv in tensors:
                self.v[name] = np.asarray(tensors[kv], dtype=self.v[name].dtype).reshape(self.v[name].shape)
        if "__step__" in tensors:
            self.step_count = int(round(float(np.asarray(tensors["__step__"]).reshape(()))))
