"""Adam with a staircase exponential learning-rate decay."""

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StateError


@dataclass
class AdamConfig:
    lr0: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.999
    decay_interval: int = 1000
    staircase: bool = True


def lr_at(t, lr0=0.001, decay=0.999, decay_interval=1000, staircase=True):
    """Learning rate for 0-based step ``t``: lr0 * decay ** (t // decay_interval)."""
    if t < 0:
        raise ValueError(f"step index must be non-negative, got {t}")
    exponent = t // decay_interval if staircase else t / decay_interval
    return lr0 * decay ** exponent


class Adam:
    """Bias-corrected Adam; epsilon is added after the square root.

    Parameters and gradients are passed as name -> array mappings and updated in place,
    so the same optimizer drives any model that can expose its arrays by name.
    """

    def __init__(self, config=None):
        self.config = config or AdamConfig()
        self.t = 0
        self.m = {}
        self.v = {}

    def lr(self):
        c = self.config
        return lr_at(self.t, c.lr0, c.decay, c.decay_interval, c.staircase)

    def step(self, params, grads):
        c = self.config
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for tensor {name!r} at step {self.t}")
        lr = self.lr()
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, theta in params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise StateError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            theta -= lr * m_hat / (np.sqrt(v_hat) + c.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, t, arrays):
        self.t = int(t)
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            if kind not in ("m", "v"):
                raise StateError(f"unexpected optimizer state entry {key!r}")
            getattr(self, kind)[name] = np.array(arr)
