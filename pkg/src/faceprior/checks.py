"""Finite-difference gradient suite over every differentiable objective."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .losses import PerceptualDistance, l_dist, l_normal, l_prop, l_recon, l_viewreg
from .render import composite

GRADCHECK_TOL = 1e-4


def _sorted_bounds(rng, R, n):
    return 2.0 + np.cumsum(0.05 + rng.random((R, n + 1)), axis=1) / n


def _blob_sigma(x):
    r2 = dc.sum(dc.square(x - np.array([0.1, -0.2, 0.05])), axis=-1)
    return 4.0 * dc.exp(-2.0 * r2) + 0.1


def _blob_color(x):
    return dc.sigmoid(dc.matmul(x, np.array([[1.0, -0.5, 0.3], [0.2, 0.8, -1.0], [-0.6, 0.4, 0.9]])))


def gradient_suite(probes: int = 100, seed: int = 0) -> list:
    """``[(name, worst relative error)]`` for each objective and compositing input.

    Every check compares reverse-mode gradients with central differences on
    ``probes`` random components, in double precision.
    """
    prev = dc.get_dtype()
    dc.set_dtype(np.float64)
    try:
        return _run(probes, np.random.default_rng(seed))
    finally:
        dc.set_dtype(prev)


def _run(probes, rng):
    def check(name, f, x):
        idx = rng.choice(x.size, min(probes, x.size), replace=False)
        results.append((name, dc.gradcheck(f, x, indices=idx)))

    results = []
    R, S = 8, 16

    pred, target = rng.random((60, 3)), rng.random((60, 3))
    mask = (np.arange(60) % 4 != 0).astype(float)
    check("recon", lambda p: l_recon(p, target, mask), pred)

    t_nerf, t_prop = _sorted_bounds(rng, R, S), _sorted_bounds(rng, R, 12)
    w_nerf = rng.random((R, S)) / S
    check("prop", lambda w: l_prop(t_nerf, w_nerf, t_prop, w), rng.random((R, 12)) / 40)

    s = np.sort(rng.random((R, S + 1)), axis=1)
    check("dist", lambda w: l_dist(s, w), rng.random((R, S)))

    n_an = rng.normal(size=(R, S, 3))
    n_an /= np.linalg.norm(n_an, axis=-1, keepdims=True)
    w = rng.random((R, S))
    check("normal/weights", lambda x: l_normal(x, n_an, dc.normalize(dc.Tensor(n_an + 0.3))), w)
    check("normal/predicted", lambda x: l_normal(w, n_an, dc.normalize(x)), rng.normal(size=(R, S, 3)))

    check("viewdir", l_viewreg, rng.normal(size=(15, 8)))

    b = rng.random((12, 12, 3))
    pd = PerceptualDistance(0)
    check("perceptual", lambda a: pd(a, b), rng.random((12, 12, 3)))

    t = _sorted_bounds(rng, R, S)
    sigma, color = rng.exponential(1.5, (R, S)), rng.random((R, S, 3))
    proj = rng.normal(size=3)

    def rgb_sum(sg, cl, tt):
        return dc.sum(composite(sg, cl, tt).rgb * proj)
    check("composite/density", lambda x: rgb_sum(x, color, t), sigma)
    check("composite/color", lambda x: rgb_sum(sigma, x, t), color)
    check("composite/boundaries", lambda x: rgb_sum(sigma, color, x), t)

    o = np.array([0.0, 0.0, 3.0])
    dirs = rng.normal(size=(R, 3)) * 0.1 + np.array([0.0, 0.0, -1.0])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    x0 = o + dirs[:, None] * (0.5 * (t[:, 1:] + t[:, :-1]))[..., None] - np.array([0, 0, 0.5])

    def by_position(x):
        return dc.sum(composite(_blob_sigma(x), _blob_color(x), t).rgb * proj)
    check("composite/positions", by_position, x0)
    return results
