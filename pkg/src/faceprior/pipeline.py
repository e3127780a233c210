"""Prior training, latent inversion, few-view fine-tuning and evaluation.

The three stages share one optimizer recipe (Adam, exponential learning-rate
decay, global-norm clipping) and differ in what they optimize:

* prior training updates every network weight and the per-identity codebook;
  the morphable codes of the training records stay fixed;
* inversion updates only the target latent ``w`` against image patches;
* fine-tuning updates every network weight together with ``w``.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import diffcore as dc
from .camera import Camera
from .field import FieldConfig, FieldParams, checkpoint_bytes, checkpoint_from_bytes, view_weights
from .losses import (LossWeights, PerceptualDistance, fit_objective, l_prop, l_recon, psnr, ssim,
                     perceptual_distance)
from .meta import camera_entries
from .optim import Adam, clip_by_global_norm, exp_decay
from .render import NetworkField, Rays, RenderConfig, gen_rays, render_image, render_rays

log = logging.getLogger(__name__)

INTERP_EPS = 1e-8


class DensityCollapse(RuntimeError):
    """Foreground accumulation fell below the collapse threshold."""

    def __init__(self, step: int, accumulation: float, threshold: float):
        super().__init__(f"density collapse at step {step}: mean foreground accumulation "
                         f"{accumulation:.3g} < {threshold}")
        self.step, self.accumulation = step, accumulation


class Divergence(FloatingPointError):
    """A loss or gradient became non-finite; ``last_good`` holds the previous weights."""

    def __init__(self, step: int, last_good=None):
        super().__init__(f"optimization diverged at step {step}")
        self.step, self.last_good = step, last_good


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_rays: int = 4096
    lr_start: float = 2e-3
    lr_end: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float | None = 1e-3
    background_steps: int = 2000          # prior only: steps supervised with background
    background_fade: int = 0              # prior only: steps over which the background target fades to black
    collapse_check_steps: int = 200       # prior only: foreground steps before the probe
    collapse_threshold: float = 0.01
    probe_rays: int = 512
    patch_size: int = 32                  # inversion only
    patches: int = 4                      # inversion only
    deterministic: bool = True
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_rays < 1 or self.background_steps < 0 or self.background_fade < 0:
            raise ValueError("step counts must be >= 0 and batch_rays >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")

    def rng(self) -> np.random.Generator:
        if self.deterministic:
            return np.random.default_rng(np.random.SeedSequence([self.seed, 0x7241]))
        return np.random.default_rng()


# ---------------------------------------------------------------------- data

@dataclass
class View:
    """One posed image with its morphable codes; duck-types dataset records."""
    image: np.ndarray
    alpha: np.ndarray
    camera: Camera
    beta: np.ndarray
    psi: np.ndarray
    identity: int = -1


def downscale(view, resolution: int) -> View:
    """Box-filter a view to ``resolution`` pixels square, rescaling its camera."""
    H, W = view.image.shape[:2]
    if (H, W) == (resolution, resolution):
        return View(view.image, view.alpha, view.camera, view.beta, view.psi, view.identity)

    def resize(a):
        return np.asarray(Image.fromarray(np.asarray(a, np.float32)).resize(
            (resolution, resolution), Image.BOX), dtype=float)
    img = np.stack([resize(view.image[..., c]) for c in range(3)], axis=-1)
    return View(img, resize(view.alpha), view.camera.scaled(resolution, resolution),
                view.beta, view.psi, view.identity)


@dataclass
class RaySet:
    """Every pixel of a list of views as rays with colors, masks and frozen codes."""
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    rgb: np.ndarray
    alpha: np.ndarray
    cond: np.ndarray          # (N, d_beta + d_psi)
    identity: np.ndarray      # (N,)
    view: np.ndarray          # (N,) index of the source view

    def __len__(self):
        return len(self.origins)

    @classmethod
    def from_views(cls, views, bound: float = 1.3) -> "RaySet":
        if not views:
            raise ValueError("no views given")
        parts = []
        for k, v in enumerate(views):
            r = gen_rays(v.camera, bound=bound)
            n = len(r)
            cond = np.concatenate([np.ravel(v.beta), np.ravel(v.psi)])
            parts.append((r.origins, r.dirs, r.near, r.far, v.image.reshape(-1, 3),
                          v.alpha.reshape(-1), np.tile(cond, (n, 1)),
                          np.full(n, v.identity, np.int64), np.full(n, k, np.int64)))
        return cls(*(np.concatenate(cols) for cols in zip(*parts)))

    def take(self, idx) -> "RaySet":
        return RaySet(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))

    def rays(self) -> Rays:
        return Rays(self.origins, self.dirs, self.near, self.far)

    def target(self, background: float) -> np.ndarray:
        """Images with the background scaled by ``background`` (1 full, 0 masked)."""
        keep = self.alpha + (1.0 - self.alpha) * float(background)
        return self.rgb * keep[:, None]


def load_views(root, identities=None, expressions=None, views=None) -> list:
    """Dataset records selected by index lists (``None`` selects all)."""
    from .synthgen import load_manifest, read_record
    counts = load_manifest(root)["counts"]
    pick = [range(counts[k]) if sel is None else sel for k, sel in
            (("identities", identities), ("expressions", expressions), ("views", views))]
    return [read_record(root, i, e, v) for i in pick[0] for e in pick[1] for v in pick[2]]


def _apply(opt: Adam, leaves, loss, cfg: TrainConfig, step: int) -> float:
    grads = dc.backward(loss, leaves)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise dc.NonFiniteError("non-finite gradient")
    norm = clip_by_global_norm(grads, cfg.clip_norm)
    opt.step(grads, lr=exp_decay(step, cfg.steps, cfg.lr_start, cfg.lr_end))
    return norm


def _codes(cond, w):
    return dc.concat([dc.Tensor(cond), w], axis=-1)


def _broadcast_code(w, n):
    return dc.broadcast_to(dc.reshape(w, (1, -1)), (n, w.shape[-1]))


# --------------------------------------------------------------------- prior

@dataclass
class PriorResult:
    params: FieldParams
    history: list
    probe_accumulation: float


def foreground_accumulation(params: FieldParams, data: RaySet, rcfg: RenderConfig) -> float:
    with dc.no_grad():
        codes = _codes(data.cond, params.codes_for(data.identity))
        out = render_rays(NetworkField(params), data.rays(), codes, rcfg, None)
    return float(np.mean(out.acc.data))


def background_level(step: int, bg_steps: int, fade: int) -> float:
    """Weight of the background in the target: 1 for ``bg_steps``, then a linear fade to 0."""
    if step < bg_steps:
        return 1.0
    if fade <= 0 or step >= bg_steps + fade:
        return 0.0
    return 1.0 - (step - bg_steps + 1) / (fade + 1)


def train_prior(views, field_cfg: FieldConfig, cfg: TrainConfig, rcfg: RenderConfig | None = None,
                weights: LossWeights | None = None, background: bool = True,
                init: FieldParams | None = None) -> PriorResult:
    """Auto-decoder training of the conditional field on posed multi-identity views.

    With ``background`` the first ``cfg.background_steps`` steps supervise the
    full images; afterwards targets are masked to the foreground. Once
    ``cfg.collapse_check_steps`` foreground steps have run, and again at the
    end, the mean accumulation on a fixed batch of foreground rays is probed;
    below ``cfg.collapse_threshold`` training aborts with
    :class:`DensityCollapse`.
    """
    rcfg = rcfg or RenderConfig()
    weights = weights or LossWeights()
    data = RaySet.from_views(views, rcfg.bound)
    ids = np.unique(data.identity)
    fcfg = dataclasses.replace(field_cfg, n_codes=len(ids))
    params = init.copy() if init is not None else FieldParams.init(fcfg, cfg.seed)
    params.code_ids = ids
    rng = cfg.rng()
    fg = np.flatnonzero(data.alpha > 0.5)
    if len(fg) == 0:
        raise ValueError("views contain no foreground pixels")
    probe = data.take(rng.choice(fg, min(cfg.probe_rays, len(fg)), replace=False))
    leaves = params.leaves()
    opt = Adam(leaves, cfg.lr_start, cfg.beta1, cfg.beta2)
    bg_steps = cfg.background_steps if background else 0
    fade = cfg.background_fade if background else 0
    check_at = {min(bg_steps + fade + cfg.collapse_check_steps, cfg.steps), cfg.steps}
    history, acc = [], float("nan")
    for step in range(cfg.steps + 1):
        if step in check_at:
            acc = foreground_accumulation(params, probe, rcfg)
            log.info("event=collapse_probe step=%d accumulation=%.6g", step, acc)
            if acc < cfg.collapse_threshold:
                raise DensityCollapse(step, acc, cfg.collapse_threshold)
        if step == cfg.steps:
            break
        batch = data.take(rng.integers(0, len(data), cfg.batch_rays))
        codes = _codes(batch.cond, params.codes_for(batch.identity))
        try:
            out = render_rays(NetworkField(params), batch.rays(), codes, rcfg, rng)
            level = background_level(step, bg_steps, fade)
            recon = l_recon(out.rgb, batch.target(level))
            prop = sum((l_prop(out.t, out.weights, t, w) for t, w in out.proposals), dc.Tensor(0.0))
            loss = recon + weights.prop * prop
            _apply(opt, leaves, loss, cfg, step)
        except dc.NonFiniteError as exc:
            raise Divergence(step) from exc
        history.append(float(loss.data))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("event=prior_step step=%d loss=%.6g recon=%.6g prop=%.6g background=%.3g", step,
                     history[-1], float(recon.data), float(prop.data), level)
    return PriorResult(params, history, acc)


# ----------------------------------------------------------------- inversion

def _patch_pixels(rng, H, W, size):
    size = min(size, H, W)
    r0, c0 = rng.integers(0, H - size + 1), rng.integers(0, W - size + 1)
    rr, cc = np.meshgrid(np.arange(r0, r0 + size), np.arange(c0, c0 + size), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1), size


def invert(params: FieldParams, views, cfg: TrainConfig, rcfg: RenderConfig | None = None,
           weights: LossWeights | None = None, w_init=None):
    """Optimize only the latent ``w`` so renders of ``views`` match their masked images.

    ``views`` should already be at the prior's resolution. Each step renders
    ``cfg.patches`` random square patches and minimizes mean absolute error
    plus ``weights.perceptual`` times the perceptual distance. Returns
    ``(w, history)``.
    """
    rcfg = rcfg or RenderConfig()
    weights = weights or LossWeights()
    if not views:
        raise ValueError("no views given")
    w0 = np.mean(params["codebook"].data, axis=0) if w_init is None else np.asarray(w_init, float)
    w = dc.Tensor(w0.copy(), requires_grad=True, name="w_target")
    opt = Adam([w], cfg.lr_start, cfg.beta1, cfg.beta2)
    fld = NetworkField(params)
    perceptual = PerceptualDistance(cfg.seed) if weights.perceptual else None
    rng = cfg.rng()
    history = []
    for step in range(cfg.steps):
        rays, targets, conds, shape = [], [], [], None
        for _ in range(cfg.patches):
            v = views[rng.integers(len(views))]
            H, W = v.image.shape[:2]
            px, size = _patch_pixels(rng, H, W, cfg.patch_size)
            shape = (size, size)
            rays.append(gen_rays(v.camera, px, rcfg.bound))
            targets.append((v.image * v.alpha[..., None])[px[:, 0], px[:, 1]])
            conds.append(np.tile(np.concatenate([np.ravel(v.beta), np.ravel(v.psi)]), (len(px), 1)))
        rays = Rays.cat(rays)
        target = np.concatenate(targets)
        codes = _codes(np.concatenate(conds), _broadcast_code(w, len(rays)))
        try:
            out = render_rays(fld, rays, codes, rcfg, rng)
            loss = l_recon(out.rgb, target)
            if perceptual is not None:
                img_shape = (cfg.patches,) + shape + (3,)
                loss = loss + weights.perceptual * perceptual(dc.reshape(out.rgb, img_shape),
                                                              target.reshape(img_shape))
            _apply(opt, [w], loss, cfg, step)
        except dc.NonFiniteError as exc:
            raise Divergence(step) from exc
        history.append(float(loss.data))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("event=invert_step step=%d loss=%.6g", step, history[-1])
    return w.data.copy(), history


# ---------------------------------------------------------------- fine-tuning

@dataclass
class PersonalizedModel:
    """A fine-tuned field bound to one subject and its input cameras.

    ``mode`` is ``"studio"`` (one shared expression) or ``"itw"`` (one
    expression per input image, blended for novel cameras).
    """
    params: FieldParams
    w: np.ndarray
    beta: np.ndarray
    psis: np.ndarray            # (n_images, d_psi)
    cameras: list
    mode: str = "itw"
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.psis = np.atleast_2d(np.asarray(self.psis, float))
        if len(self.psis) != len(self.cameras):
            raise ValueError("need one expression code per input camera")
        if self.mode not in ("studio", "itw"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def expression_for(self, camera: Camera):
        """Expression code for ``camera`` and the per-input blend weights."""
        if self.mode == "studio":
            return self.psis[0].copy(), np.eye(len(self.psis))[0]
        return interpolate_expression(self.psis, [c.center for c in self.cameras], camera.center)

    def code_for(self, camera: Camera) -> np.ndarray:
        psi, _ = self.expression_for(camera)
        return np.concatenate([np.ravel(self.beta), psi, self.w])

    def to_bytes(self) -> bytes:
        cams = [{k: np.ravel(v).tolist() for k, v in camera_entries(c)} for c in self.cameras]
        extra = {"w": self.w.tolist(), "beta": np.ravel(self.beta).tolist(),
                 "psis": self.psis.tolist(), "cameras": cams, "mode": self.mode}
        return checkpoint_bytes(self.params, extra)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PersonalizedModel":
        from .meta import camera_from_block
        params, extra = checkpoint_from_bytes(blob)
        cams = [camera_from_block({k: (int(v[0]) if k in ("width", "height") else np.array(v))
                                   for k, v in c.items()}) for c in extra["cameras"]]
        return cls(params, np.array(extra["w"]), np.array(extra["beta"]), np.array(extra["psis"]),
                   cams, extra["mode"])

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PersonalizedModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def finetune(params: FieldParams, w_target, views, cfg: TrainConfig,
             rcfg: RenderConfig | None = None, weights: LossWeights | None = None,
             mode: str = "itw") -> PersonalizedModel:
    """Optimize every network weight and ``w`` on foreground-masked input views.

    Rays are drawn individually across all views. On a non-finite loss the
    run stops with :class:`Divergence` carrying the last finite model.
    """
    rcfg = rcfg or RenderConfig()
    weights = weights or LossWeights()
    p = params.copy()
    w = dc.Tensor(np.array(w_target, float), requires_grad=True, name="w_target")
    data = RaySet.from_views(views, rcfg.bound)
    leaves = p.leaves(include_codebook=False) + [w]
    opt = Adam(leaves, cfg.lr_start, cfg.beta1, cfg.beta2)
    fld = NetworkField(p)
    rng = cfg.rng()
    history = []
    need_normals = weights.normal > 0
    for step in range(cfg.steps):
        batch = data.take(rng.integers(0, len(data), cfg.batch_rays))
        codes = _codes(batch.cond, _broadcast_code(w, len(batch)))
        snapshot = [l.data.copy() for l in leaves]
        try:
            out = render_rays(fld, batch.rays(), codes, rcfg, rng, with_normals=need_normals)
            total, parts = fit_objective(out, batch.target(0.0), None, view_weights(p), weights)
            _apply(opt, leaves, total, cfg, step)
            if not all(np.all(np.isfinite(l.data)) for l in leaves):
                raise dc.NonFiniteError("non-finite parameters")
        except dc.NonFiniteError as exc:
            for leaf, saved in zip(leaves, snapshot):
                leaf.data[...] = saved
            last = PersonalizedModel(p, w.data.copy(), _first(views, "beta"),
                                     [v.psi for v in views], [v.camera for v in views], mode, history)
            raise Divergence(step, last) from exc
        history.append(float(total.data))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("event=finetune_step step=%d loss=%.6g %s", step, history[-1],
                     " ".join(f"{k}={float(v.data):.6g}" for k, v in parts.items()))
    psis = [v.psi for v in views]
    if mode == "studio":
        psis = [np.mean(psis, axis=0)] * len(views)
    return PersonalizedModel(p, w.data.copy(), _first(views, "beta"), psis,
                             [v.camera for v in views], mode, history)


def _first(views, attr):
    return np.array(getattr(views[0], attr), float)


# ----------------------------------------------------------------- novel views

def interpolate_expression(psis, positions, target, eps: float = INTERP_EPS):
    """Inverse-squared-distance blend of per-image expression codes.

    Returns ``(psi, weights)`` with ``weights_i`` proportional to
    ``1 / (eps + ||target - positions_i||^2)`` and summing to one.
    """
    psis = np.atleast_2d(np.asarray(psis, float))
    positions = np.atleast_2d(np.asarray(positions, float))
    if len(psis) < 1 or len(psis) != len(positions):
        raise ValueError("need one position per expression code and at least one of each")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d2 = np.sum((positions - np.asarray(target, float)) ** 2, axis=1)
    raw = 1.0 / (eps + d2)
    weights = raw / raw.sum()
    return weights @ psis, weights


def render_novel_view(model: PersonalizedModel, camera: Camera, resolution: int | None = None,
                      rcfg: RenderConfig | None = None, chunk: int = 2048) -> dict:
    """Color, accumulation, depth and world-space normals for a new camera."""
    if resolution is not None:
        camera = camera.scaled(resolution, resolution)
    return render_image(NetworkField(model.params), camera, model.code_for(camera),
                        rcfg or RenderConfig(), chunk)


METRIC_FIELDS = ("view", "psnr", "ssim", "perceptual")


def evaluate(model: PersonalizedModel, holdout, rcfg: RenderConfig | None = None,
             path=None, names=None, perceptual_seed: int = 0) -> list:
    """Per-view PSNR, SSIM and perceptual distance against masked holdout images.

    The last row is the mean over views. With ``path`` the table is written
    as CSV.
    """
    if not holdout:
        raise ValueError("holdout set is empty")
    names = names or [f"view{k}" for k in range(len(holdout))]
    rows = []
    for name, v in zip(names, holdout):
        pred = render_novel_view(model, v.camera, rcfg=rcfg)["rgb"]
        gt = v.image * v.alpha[..., None]
        rows.append({"view": name, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt),
                     "perceptual": perceptual_distance(pred, gt, perceptual_seed)})
    rows.append({"view": "mean", **{k: float(np.mean([r[k] for r in rows]))
                                    for k in METRIC_FIELDS[1:]}})
    if path is not None:
        write_metrics_csv(path, rows)
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(METRIC_FIELDS)
        for r in rows:
            wr.writerow([r["view"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as f:
        return [{k: (v if k == "view" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


# -------------------------------------------------------------------- ablation

def scratch_params(field_cfg: FieldConfig, seed: int) -> tuple:
    """A freshly initialized field and zero latent, the no-pre-training baseline."""
    p = FieldParams.init(dataclasses.replace(field_cfg, n_codes=1), seed)
    return p, np.zeros(field_cfg.d_w)


def few_shot(params: FieldParams, views, holdout, invert_cfg: TrainConfig | None,
             finetune_cfg: TrainConfig, rcfg: RenderConfig, weights: LossWeights,
             resolution: int | None = None, mode: str = "itw", w_init=None):
    """Inversion (skipped when ``invert_cfg`` is None) then fine-tuning then evaluation.

    Returns ``(model, metric rows)``.
    """
    if invert_cfg is not None:
        small = [downscale(v, resolution) for v in views] if resolution else views
        w, _ = invert(params, small, invert_cfg, rcfg, weights, w_init)
    else:
        w = np.zeros(params.cfg.d_w) if w_init is None else np.asarray(w_init, float)
    model = finetune(params, w, views, finetune_cfg, rcfg, weights, mode)
    return model, evaluate(model, holdout, rcfg)
