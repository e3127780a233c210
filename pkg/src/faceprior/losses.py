"""Training objectives and image-quality metrics.

Objectives operate on :class:`~faceprior.diffcore.Tensor` values and are
differentiable. Metrics (PSNR, SSIM) take plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

PSNR_CAP = 99.0


@dataclass
class LossWeights:
    prop: float = 1.0
    perceptual: float = 0.1
    normal: float = 3e-4
    viewdir: float = 0.1
    dist: float = 0.01

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")


# -------------------------------------------------------------- reconstruction

def l_recon(pred, target, mask=None):
    """Mean absolute error over masked pixels and channels.

    ``pred`` and ``target`` are ``(..., 3)``; ``mask`` is ``(...)`` with
    nonnegative entries (pixels with zero mask contribute nothing).
    """
    pred, target = dc._lift(pred), np.asarray(getattr(target, "data", target), float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    err = dc.abs(pred - target)
    if mask is None:
        return dc.mean(err)
    mask = np.asarray(mask, float)
    total = mask.sum() * pred.shape[-1]
    if total <= 0:
        raise ValueError("reconstruction mask is empty")
    return dc.sum(err * mask[..., None]) / total


# -------------------------------------------------------------------- proposal

def _rank(edges: np.ndarray, q: np.ndarray, side: str) -> np.ndarray:
    """Row-wise ``searchsorted`` of queries ``q (R, n)`` into sorted ``edges (R, m)``."""
    if side == "right":
        return np.sum(edges[:, None, :] <= q[:, :, None], axis=-1)
    return np.sum(edges[:, None, :] < q[:, :, None], axis=-1)


def proposal_bound(t_nerf: np.ndarray, t_prop: np.ndarray, w_prop):
    """Sum of proposal weights on intervals overlapping each radiance interval."""
    w_prop = dc._lift(w_prop)
    R, M = w_prop.shape
    csum = dc.concat([dc.Tensor(np.zeros((R, 1))), dc.cumsum(w_prop, axis=-1)], axis=-1)
    lo = np.clip(_rank(t_prop, t_nerf[:, :-1], "right") - 1, 0, M)
    hi = np.clip(_rank(t_prop, t_nerf[:, 1:], "left"), 0, M)
    return dc.take_along_axis(csum, hi, -1) - dc.take_along_axis(csum, lo, -1)


def l_prop(t_nerf, w_nerf, t_prop, w_prop):
    """Penalty for radiance weights that exceed the proposal's overlap bound.

    Per ray ``sum_i max(0, w_i - bound_i)^2 / w_i`` over intervals with
    ``w_i > 0``, averaged over rays. Radiance weights are treated as
    constants, so only the proposal weights receive gradient.
    """
    w = np.asarray(getattr(w_nerf, "data", w_nerf), float)
    t_nerf, t_prop = np.asarray(t_nerf, float), np.asarray(t_prop, float)
    bound = proposal_bound(t_nerf, t_prop, w_prop)
    live = w > 0
    excess = dc.relu(dc.Tensor(w) - bound)
    per = dc.square(excess) * np.where(live, 1.0 / np.where(live, w, 1.0), 0.0)
    return dc.mean(dc.sum(per, axis=-1))


# ---------------------------------------------------------------- distortion

def l_dist(s, w):
    """Distortion of weights ``w (R, K)`` on normalized boundaries ``s (R, K + 1)``.

    ``sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 (s_{i+1} - s_i)`` with
    interval midpoints ``m``, evaluated in linear time through prefix sums and
    averaged over rays.
    """
    s = np.asarray(s, float)
    w = dc._lift(w)
    m = 0.5 * (s[..., 1:] + s[..., :-1])
    delta = s[..., 1:] - s[..., :-1]
    wm = w * m
    w_before = dc.cumsum(w, axis=-1) - w
    wm_before = dc.cumsum(wm, axis=-1) - wm
    cross = 2.0 * dc.sum(w * (m * w_before - wm_before), axis=-1)
    own = dc.sum(dc.square(w) * delta, axis=-1) / 3.0
    return dc.mean(cross + own)


def l_dist_pairwise(s, w) -> float:
    """Quadratic-time reference for :func:`l_dist` on plain arrays."""
    s, w = np.atleast_2d(s), np.atleast_2d(w)
    m = 0.5 * (s[:, 1:] + s[:, :-1])
    total = 0.0
    for r in range(len(w)):
        total += np.sum(w[r][:, None] * w[r][None, :] * np.abs(m[r][:, None] - m[r][None, :]))
        total += np.sum(w[r] ** 2 * np.diff(s[r])) / 3.0
    return total / len(w)


# -------------------------------------------------------------------- normals

def l_normal(weights, analytic, predicted, valid=None):
    """``sum_i w_i (1 - n_i . n_hat_i)`` per ray, averaged over rays.

    Samples where ``valid`` is false (vanishing density gradient) are skipped.
    """
    weights = dc._lift(weights)
    cos = dc.sum(dc._lift(analytic) * dc._lift(predicted), axis=-1)
    term = weights * (1.0 - cos)
    if valid is not None:
        term = term * np.asarray(valid, float)
    return dc.mean(dc.sum(term, axis=-1))


def l_viewreg(view_weights):
    """Squared L2 norm of the weights that read the view direction."""
    return dc.sum(dc.square(dc._lift(view_weights)))


# ----------------------------------------------------------------- perceptual

class PerceptualDistance:
    """Distance in a fixed random multi-scale convolutional feature space.

    Each scale applies ``n_filters`` random 3x3 filters to the image (mapped
    to [-1, 1]), normalizes every pixel's response vector to unit length, and
    compares squared differences; the next scale halves the resolution by
    2x2 averaging. A plain pixel MSE term is added so the distance vanishes
    only for identical images.
    """

    def __init__(self, seed: int = 0, scales: int = 3, n_filters: int = 16, eps: float = 1e-6):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1915]))
        self.filters = [rng.normal(size=(27, n_filters)) / np.sqrt(27.0) for _ in range(scales)]
        self.eps = eps

    @staticmethod
    def _patches(x):
        H, W = x.shape[-3], x.shape[-2]
        cols = [x[..., i:H - 2 + i, j:W - 2 + j, :] for i in range(3) for j in range(3)]
        return dc.concat(cols, axis=-1)

    @staticmethod
    def _pool(x):
        H, W = x.shape[-3] // 2 * 2, x.shape[-2] // 2 * 2
        x = x[..., :H, :W, :]
        lead = x.shape[:-3]
        x = dc.reshape(x, lead + (H // 2, 2, W // 2, 2, x.shape[-1]))
        n = len(lead)
        return dc.mean(x, axis=(n + 1, n + 3))

    def features(self, img) -> list:
        x = 2.0 * dc._lift(img) - 1.0
        feats = []
        for k, F in enumerate(self.filters):
            if min(x.shape[-3], x.shape[-2]) < 3:
                break
            f = dc.matmul(self._patches(x), F)
            norm = dc.sqrt(dc.sum(dc.square(f), axis=-1, keepdims=True) + self.eps)
            feats.append(f / norm)
            if k + 1 < len(self.filters):
                x = self._pool(x)
        return feats

    def __call__(self, a, b):
        a, b = dc._lift(a), dc._lift(b)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        if min(a.shape[-3], a.shape[-2]) < 3:
            raise ValueError("images must be at least 3x3")
        total = dc.mean(dc.square(a - b))
        for fa, fb in zip(self.features(a), self.features(b)):
            total = total + dc.mean(dc.sum(dc.square(fa - fb), axis=-1))
        return total


def perceptual_distance(a, b, seed: int = 0) -> float:
    """Float-valued convenience wrapper around :class:`PerceptualDistance`."""
    with dc.no_grad():
        return float(PerceptualDistance(seed)(a, b).data)


# -------------------------------------------------------------------- metrics

def psnr(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' filtering over the first two axes."""
    k = len(g)
    H, W = img.shape[:2]
    rows = sum(g[i] * img[i:H - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:W - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with a Gaussian window, averaged over channels.

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(window, a.shape[0], a.shape[1])
    size -= 1 - size % 2
    g = _gaussian_window(size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------- combined

def fit_objective(out, target, mask, view_weights, weights: LossWeights):
    """Fine-tuning objective and its unweighted parts.

    ``out`` is a render output carrying radiance weights, proposal histories
    and (optionally) analytic normals. Terms whose weight is zero are still
    reported but skipped in the total.
    """
    parts = {"recon": l_recon(out.rgb, target, mask)}
    parts["prop"] = dc.Tensor(0.0)
    for t_p, w_p in out.proposals:
        parts["prop"] = parts["prop"] + l_prop(out.t, out.weights, t_p, w_p)
    if out.analytic_normals is not None:
        parts["normal"] = l_normal(out.weights, out.analytic_normals, out.sample.normal,
                                   out.normal_valid)
    else:
        parts["normal"] = dc.Tensor(0.0)
    parts["viewdir"] = l_viewreg(view_weights)
    parts["dist"] = l_dist(out.s, out.weights)
    total = parts["recon"]
    for key, lam in (("prop", weights.prop), ("normal", weights.normal),
                     ("viewdir", weights.viewdir), ("dist", weights.dist)):
        if lam:
            total = total + lam * parts[key]
    return total, parts
