"""Ray generation and hierarchical volume rendering.

A ray is sampled in three rounds: stratified intervals feed the proposal
network, whose weights are resampled by inverse CDF; the proposal network
runs again on the new intervals and is resampled once more; the radiance
network is evaluated on the final intervals and composited with

    w_i = T_i (1 - exp(-sigma_i delta_i)),   T_i = exp(-sum_{j<i} sigma_j delta_j)

against a black background. The last interval ends at the far bound.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import diffcore as dc
from .camera import Camera
from .field import (FieldParams, FieldSample, density_gradient, normals_from_gradient, query_nerf,
                    query_proposal)

DEPTH_EPS = 1e-6


@dataclass
class Rays:
    origins: np.ndarray       # (R, 3)
    dirs: np.ndarray          # (R, 3) unit
    near: np.ndarray          # (R,)
    far: np.ndarray           # (R,)

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx])

    @staticmethod
    def cat(parts) -> "Rays":
        return Rays(*(np.concatenate([getattr(p, k) for p in parts])
                      for k in ("origins", "dirs", "near", "far")))


@dataclass
class RenderConfig:
    n_proposal: int = 32          # intervals per proposal round
    n_nerf: int = 32              # intervals for the radiance network
    proposal_rounds: int = 2
    padding: float = 0.2          # uniform mass mixed into resampling pdfs
    bound: float = 1.3            # scene radius around the origin
    white_background: bool = False


def gen_rays(camera: Camera, pixels=None, bound: float = 1.3, near=None, far=None) -> Rays:
    """Rays through pixel centers.

    ``pixels`` is ``(N, 2)`` integer ``(row, col)`` pairs, or ``None`` for the
    full frame in row-major order. Near and far default to the camera's
    distance from the origin minus and plus ``bound``.
    """
    K = camera.K
    if pixels is None:
        ii, jj = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
    pixels = np.asarray(pixels)
    u, v = pixels[:, 1] + 0.5, pixels[:, 0] + 0.5
    dcam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=1)
    dirs = dcam @ camera.R
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    o = camera.center
    dist = np.linalg.norm(o)
    if near is None:
        if dist <= bound:
            raise ValueError(f"camera at distance {dist:.3f} is inside the scene bound {bound}")
        near, far = dist - bound, dist + bound
    n = len(pixels)
    return Rays(np.tile(o, (n, 1)), dirs, np.full(n, float(near)), np.full(n, float(far)))


def stratified_samples(near, far, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``n`` intervals per ray as ``(R, n + 1)`` boundaries.

    Interior boundaries sit on the uniform grid, each shifted by up to half a
    stratum when ``rng`` is given; the endpoints stay at ``near`` and ``far``.
    """
    if n < 2:
        raise ValueError("need at least two samples per ray")
    near, far = np.asarray(near, float), np.asarray(far, float)
    u = np.broadcast_to(np.linspace(0.0, 1.0, n + 1), near.shape + (n + 1,)).copy()
    if rng is not None:
        u[..., 1:-1] += (rng.random(near.shape + (n - 1,)) - 0.5) / n
    return near[..., None] + (far - near)[..., None] * u


def midpoints(t):
    return 0.5 * (t[..., 1:] + t[..., :-1])


def resample(t: np.ndarray, w: np.ndarray, n: int, rng: np.random.Generator | None = None,
             padding: float = 0.0):
    """Draw ``n`` intervals from the piecewise-constant density given by ``w`` on ``t``.

    Returns ``(t_new, flagged)``. The ``n - 1`` new interior boundaries are
    inverse-CDF images of one quantile drawn from each of ``n - 1`` equal
    strata of [0, 1] (the stratum center when ``rng`` is None); the outer
    boundaries are kept. Rays whose weights sum to zero are resampled uniformly and flagged.
    """
    t, w = np.asarray(t, float), np.asarray(w, float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    width = np.diff(t, axis=-1)
    total = w.sum(axis=-1, keepdims=True)
    flagged = total[..., 0] <= 0
    uniform = width / width.sum(axis=-1, keepdims=True)
    pdf = np.where(flagged[..., None], uniform, w / np.where(total > 0, total, 1.0))
    if padding > 0:
        pdf = (1 - padding) * pdf + padding * uniform
    cdf = np.concatenate([np.zeros(pdf.shape[:-1] + (1,)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[..., -1] = 1.0
    k = np.arange(n - 1)
    jitter = 0.5 if rng is None else rng.random(t.shape[:-1] + (n - 1,))
    u = (k + jitter) / (n - 1)
    u = np.broadcast_to(u, t.shape[:-1] + (n - 1,))
    K = t.shape[-1] - 1
    b = np.sum(cdf[..., None, :] <= u[..., None], axis=-1) - 1
    b = np.clip(b, 0, K - 1)
    c0 = np.take_along_axis(cdf, b, -1)
    c1 = np.take_along_axis(cdf, b + 1, -1)
    t0 = np.take_along_axis(t, b, -1)
    t1 = np.take_along_axis(t, b + 1, -1)
    frac = np.clip((u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.0, 1.0)
    inner = t0 + frac * (t1 - t0)
    out = np.concatenate([t[..., :1], inner, t[..., -1:]], axis=-1)
    return out, flagged


@dataclass
class Composite:
    rgb: dc.Tensor
    acc: dc.Tensor
    depth: dc.Tensor
    weights: dc.Tensor
    transmittance: dc.Tensor      # T_i per interval
    final_transmittance: dc.Tensor
    normal: dc.Tensor | None = None


def compositing_weights(sigma, t):
    """``(weights, T_i, T_final)`` for densities ``(R, S)`` on boundaries ``(R, S + 1)``."""
    sigma, t = dc._lift(sigma), dc._lift(t)
    delta = t[..., 1:] - t[..., :-1]
    tau = sigma * delta
    excl = dc.cumsum(tau, axis=-1) - tau
    trans = dc.exp(-excl)
    w = trans * (-dc.expm1(-tau))
    return w, trans, dc.exp(-dc.sum(tau, axis=-1))


def composite(sigma, color, t, normals=None) -> Composite:
    """Alpha-composite samples on intervals ``t`` over a black background."""
    t = dc._lift(t)
    w, trans, t_final = compositing_weights(sigma, t)
    rgb = dc.sum(dc.reshape(w, w.shape + (1,)) * color, axis=-2)
    acc = dc.sum(w, axis=-1)
    mids = midpoints(t)
    acc_safe = dc.where(acc.data > DEPTH_EPS, acc, DEPTH_EPS)
    depth = dc.sum(w * mids, axis=-1) / acc_safe
    normal = None
    if normals is not None:
        normal = dc.normalize(dc.sum(dc.reshape(w, w.shape + (1,)) * normals, axis=-2))
    return Composite(rgb, acc, depth, w, trans, t_final, normal)


# ------------------------------------------------------------------- fields

class NetworkField:
    """Adapter from trained parameters to the rendering interface."""

    def __init__(self, params: FieldParams):
        self.params = params

    def proposal(self, x, codes):
        return query_proposal(self.params, x, codes)

    def radiance(self, x, d, codes, with_gradient=False) -> FieldSample:
        return query_nerf(self.params, x, d, codes, with_gradient)


class AnalyticField:
    """Closed-form density and color, used in place of both networks.

    ``sigma_fn(x)`` and ``color_fn(x, d)`` take Tensors of points
    ``(R, S, 3)`` and per-ray directions ``(R, 3)``.
    """

    def __init__(self, sigma_fn, color_fn):
        self.sigma_fn, self.color_fn = sigma_fn, color_fn

    def proposal(self, x, codes):
        return self.sigma_fn(dc._lift(x))

    def radiance(self, x, d, codes, with_gradient=False) -> FieldSample:
        xt = dc._lift(x)
        sigma = self.sigma_fn(xt)
        color = self.color_fn(xt, dc._lift(d))
        grad = None
        if with_gradient:
            grad = dc.Tensor(density_gradient(self.sigma_fn, np.asarray(xt.data)))
        n = dc.Tensor(np.zeros(color.shape))
        return FieldSample(sigma, color, n, grad)


@dataclass
class RenderOutput:
    rgb: dc.Tensor
    acc: dc.Tensor
    depth: dc.Tensor
    normal: dc.Tensor
    t: np.ndarray                       # final boundaries
    s: np.ndarray                       # final boundaries, normalized to [0, 1]
    weights: dc.Tensor
    proposals: list = field(default_factory=list)   # [(t, weights)] per round
    sample: FieldSample | None = None
    analytic_normals: dc.Tensor | None = None
    normal_valid: np.ndarray | None = None
    flagged: np.ndarray | None = None


def render_rays(fld, rays: Rays, codes, cfg: RenderConfig, rng=None,
                with_normals: bool = False) -> RenderOutput:
    """Full hierarchical render of a ray batch.

    ``codes`` is ``(R, d_code)``. ``rng`` drives jitter; ``None`` renders
    deterministically from stratum midpoints.
    """
    o, d = rays.origins, rays.dirs
    t = stratified_samples(rays.near, rays.far, cfg.n_proposal, rng)
    proposals = []
    flagged = np.zeros(len(rays), bool)
    for r in range(cfg.proposal_rounds):
        x = o[:, None] + d[:, None] * midpoints(t)[..., None]
        sig = fld.proposal(x, codes)
        w, _, _ = compositing_weights(sig, t)
        proposals.append((t, w))
        n_next = cfg.n_nerf if r == cfg.proposal_rounds - 1 else cfg.n_proposal
        t, flag = resample(t, w.data, n_next, rng, cfg.padding)
        flagged |= flag
    x = o[:, None] + d[:, None] * midpoints(t)[..., None]
    smp = fld.radiance(x, d, codes, with_gradient=with_normals)
    comp = composite(smp.sigma, smp.color, t, smp.normal)
    rgb = comp.rgb
    if cfg.white_background:
        rgb = rgb + (1.0 - dc.reshape(comp.acc, comp.acc.shape + (1,)))
    an, valid = (None, None)
    if with_normals and smp.grad_sigma is not None:
        an, valid = normals_from_gradient(smp.grad_sigma)
    s = (t - rays.near[:, None]) / (rays.far - rays.near)[:, None]
    return RenderOutput(rgb, comp.acc, comp.depth, comp.normal, t, s, comp.weights, proposals,
                        smp, an, valid, flagged)


def render_pixel(fld, ray: Rays, codes, cfg: RenderConfig, rng=None) -> RenderOutput:
    """Render a single ray (a batch of one)."""
    return render_rays(fld, ray, np.atleast_2d(codes.data if isinstance(codes, dc.Tensor) else codes),
                       cfg, rng)


def render_image(fld, camera: Camera, code, cfg: RenderConfig, chunk: int = 2048) -> dict:
    """Deterministic full-frame render; ``code`` is one condition vector."""
    rays = gen_rays(camera, bound=cfg.bound)
    code = np.asarray(code.data if isinstance(code, dc.Tensor) else code, float)
    H, W = camera.K.height, camera.K.width
    rgb, acc, depth, normal = [], [], [], []
    with dc.no_grad():
        for s in range(0, len(rays), chunk):
            sub = rays.subset(slice(s, s + chunk))
            out = render_rays(fld, sub, np.tile(code, (len(sub), 1)), cfg, None)
            rgb.append(out.rgb.data)
            acc.append(out.acc.data)
            depth.append(out.depth.data)
            normal.append(out.normal.data)
    return {"rgb": np.concatenate(rgb).reshape(H, W, 3),
            "acc": np.concatenate(acc).reshape(H, W),
            "depth": np.concatenate(depth).reshape(H, W),
            "normal": np.concatenate(normal).reshape(H, W, 3)}


# ------------------------------------------------------------------ outputs

def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def write_png(path, img) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def write_normals_png(path, normals) -> None:
    """World-space normals mapped from [-1, 1] to [0, 255]."""
    write_png(path, 0.5 * (np.asarray(normals) + 1.0))


def write_pfm(path, img) -> None:
    """Single-channel or RGB float32 PFM (little-endian, bottom row first)."""
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    H, W = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{W} {H}\n-1.0\n".encode())
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        W, H = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    shape = (H, W, 3) if kind == b"PF" else (H, W)
    return data.reshape(shape)[::-1].astype(np.float32)
