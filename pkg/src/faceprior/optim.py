"""First-order optimizer shared by landmark fitting and field training."""
from __future__ import annotations

import numpy as np


def exp_decay(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Log-linear interpolation from ``lr_start`` at step 0 to ``lr_end`` at ``total``."""
    if total <= 0:
        return lr_start
    frac = min(max(step / total, 0.0), 1.0)
    return float(np.exp((1 - frac) * np.log(lr_start) + frac * np.log(lr_end)))


def clip_by_global_norm(grads: list, max_norm: float | None):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class Adam:
    """Adam with bias correction, updating a list of ``Tensor`` leaves in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list:
        return self.m + self.v
