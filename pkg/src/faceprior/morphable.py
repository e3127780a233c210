"""Linear morphable head model and landmark-based fitting.

Vertices are ``V = template + reshape(B_id @ beta + B_exp @ psi)``, followed by
an optional neck rotation and a rigid head pose. The fitting energy is

    E = w_lmk * sum ||x - mu||^2 / (2 sigma^2)     (landmarks)
      + w_id  * 0.5 (beta - m)^T C^-1 (beta - m)   (identity, Gaussian NLL)
      + w_exp * ||psi||^2                           (expression)
      + w_jnt * ||J||^2                             (neck joint)

Mesh self-intersection is not penalized.
"""
from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import meta
from .camera import Camera, Intrinsics, look_at, rodrigues, rodrigues_t
from .optim import Adam, exp_decay

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CAFM"
MODEL_VERSION = 1


class FitDivergence(FloatingPointError):
    def __init__(self, iteration: int, message: str = "landmark energy is not finite"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class MorphableModel:
    template: np.ndarray          # (n_v, 3)
    id_basis: np.ndarray          # (n_v*3, d_beta)
    exp_basis: np.ndarray         # (n_v*3, d_psi)
    triangles: np.ndarray         # (n_t, 3) int
    landmarks: np.ndarray         # (d_L,) vertex indices
    id_mean: np.ndarray           # (d_beta,)
    id_cov: np.ndarray            # (d_beta, d_beta)
    neck_weights: np.ndarray = None   # (n_v,) in [0, 1]
    neck_pivot: np.ndarray = None     # (3,)

    def __post_init__(self):
        n_v = len(self.template)
        if self.neck_weights is None:
            self.neck_weights = np.zeros(n_v)
        if self.neck_pivot is None:
            self.neck_pivot = np.zeros(3)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return len(self.template)

    @property
    def d_beta(self) -> int:
        return self.id_basis.shape[1]

    @property
    def d_psi(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    def validate(self) -> None:
        n_v = len(self.template)
        if self.template.shape != (n_v, 3):
            raise ValueError("template must be (n_v, 3)")
        for name, basis in (("identity", self.id_basis), ("expression", self.exp_basis)):
            if basis.shape[0] != 3 * n_v:
                raise ValueError(f"{name} basis has {basis.shape[0]} rows, expected {3 * n_v}")
        if len(self.landmarks) and (self.landmarks.min() < 0 or self.landmarks.max() >= n_v):
            raise ValueError("landmark index out of range")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= n_v):
            raise ValueError("triangle index out of range")
        if self.id_mean.shape != (self.d_beta,) or self.id_cov.shape != (self.d_beta,) * 2:
            raise ValueError("identity prior does not match identity basis")

    def landmark_submodel(self):
        """Template rows and basis rows restricted to the landmark vertices."""
        rows = (3 * self.landmarks[:, None] + np.arange(3)).ravel()
        return (self.template[self.landmarks], self.id_basis[rows], self.exp_basis[rows],
                self.neck_weights[self.landmarks], self.neck_pivot)

    # -- serialization: magic, u32 version, u32 dims, float64 arrays, u32 index arrays
    def to_bytes(self) -> bytes:
        n_v, n_t = len(self.template), len(self.triangles)
        head = MODEL_MAGIC + struct.pack("<6I", MODEL_VERSION, n_v, n_t, self.d_beta,
                                         self.d_psi, self.n_landmarks)
        floats = [self.template, self.id_basis, self.exp_basis, self.id_mean, self.id_cov,
                  self.neck_weights, self.neck_pivot]
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in floats)
        idx = b"".join(np.ascontiguousarray(a, dtype="<u4").tobytes()
                       for a in (self.triangles, self.landmarks))
        return head + body + idx

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MorphableModel":
        if blob[:4] != MODEL_MAGIC:
            raise ValueError("not a morphable model blob (bad magic)")
        version, n_v, n_t, d_b, d_p, d_l = struct.unpack_from("<6I", blob, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported morphable model version {version}")
        off = 4 + 24
        shapes = [(n_v, 3), (3 * n_v, d_b), (3 * n_v, d_p), (d_b,), (d_b, d_b), (n_v,), (3,)]
        arrays = []
        for shp in shapes:
            n = int(np.prod(shp))
            if off + 8 * n > len(blob):
                raise ValueError("truncated morphable model blob")
            arrays.append(np.frombuffer(blob, "<f8", n, off).reshape(shp).copy())
            off += 8 * n
        tri_n, lmk_n = 3 * n_t, d_l
        if off + 4 * (tri_n + lmk_n) != len(blob):
            raise ValueError("truncated morphable model blob")
        tris = np.frombuffer(blob, "<u4", tri_n, off).reshape(n_t, 3).astype(np.int64)
        lmks = np.frombuffer(blob, "<u4", lmk_n, off + 4 * tri_n).astype(np.int64)
        t, B, P, m, C, nw, npiv = arrays
        return cls(t, B, P, tris, lmks, m, C, nw, npiv)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MorphableModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _check_dims(model, beta, psi):
    if np.shape(beta)[-1] != model.d_beta:
        raise ValueError(f"beta has dim {np.shape(beta)[-1]}, model expects {model.d_beta}")
    if np.shape(psi)[-1] != model.d_psi:
        raise ValueError(f"psi has dim {np.shape(psi)[-1]}, model expects {model.d_psi}")


def blend(template, id_basis, exp_basis, beta, psi):
    """Linear blend; works on arrays or Tensors (differentiable in the codes)."""
    offs = dc.matmul(dc._lift(id_basis), beta) + dc.matmul(dc._lift(exp_basis), psi)
    return dc._lift(template) + dc.reshape(offs, (-1, 3))


def apply_neck(verts, weights, pivot, neck_R):
    """Rotate vertices about ``pivot`` by ``neck_R``, blended per vertex by ``weights``."""
    rel = verts - dc._lift(pivot)
    rotated = dc.matmul(rel, dc.transpose(neck_R)) + dc._lift(pivot)
    w = dc._lift(np.asarray(weights)[:, None])
    return verts + w * (rotated - verts)


def synthesize_mesh(model: MorphableModel, beta, psi, pose=None, neck=None) -> np.ndarray:
    """Vertex positions for codes ``beta``, ``psi`` under rigid ``pose = (R, t)``.

    ``neck`` is an optional axis-angle neck rotation.
    """
    beta, psi = np.asarray(beta, float), np.asarray(psi, float)
    _check_dims(model, beta, psi)
    V = model.template + (model.id_basis @ beta + model.exp_basis @ psi).reshape(-1, 3)
    if neck is not None and np.any(neck):
        R_n = rodrigues(neck)
        rel = V - model.neck_pivot
        V = V + model.neck_weights[:, None] * (rel @ R_n.T + model.neck_pivot - V)
    if pose is not None:
        R, t = pose
        V = V @ np.asarray(R).T + np.asarray(t)
    return V


def project_landmarks(vertices: np.ndarray, camera: Camera, indices=None, min_depth: float = 1e-6):
    """Pixel positions of landmark vertices and a validity mask (in front of the camera)."""
    pts = vertices if indices is None else vertices[indices]
    uv, z = camera.project(pts)
    valid = z > min_depth
    uv = np.where(valid[:, None], uv, np.nan)
    return uv, valid


def identity_logprior(beta, mean=None, cov=None):
    """Negative log density of a Gaussian identity prior, up to a constant."""
    beta_t = dc._lift(beta)
    d = beta_t.shape[-1]
    mean = np.zeros(d) if mean is None else np.asarray(mean)
    prec = np.eye(d) if cov is None else np.linalg.inv(cov)
    return _quadratic(beta_t - dc.Tensor(mean), prec)


def _quadratic(r, prec):
    """0.5 * r^T P r, summed over any leading batch axes (P symmetric)."""
    Pr = dc.matmul(dc.Tensor(prec), r) if r.ndim == 1 else dc.matmul(r, dc.Tensor(prec))
    return 0.5 * dc.sum(r * Pr)


@dataclass
class LandmarkObservation:
    mu: np.ndarray      # (d_L, 2) pixels
    sigma: np.ndarray   # (d_L,) pixels

    def __post_init__(self):
        self.mu = np.asarray(self.mu, float)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, float), (len(self.mu),)).copy()
        if np.any(self.sigma <= 0):
            raise ValueError("landmark sigma must be positive")


@dataclass
class FitState:
    beta: np.ndarray
    psi: np.ndarray                 # (n_images, d_psi)
    cameras: list                   # per-image Camera, sharing intrinsics
    head_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    head_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    neck: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "FitState":
        return copy.deepcopy(self)

    @property
    def n_images(self) -> int:
        return len(self.cameras)

    def mesh(self, model: MorphableModel, i: int) -> np.ndarray:
        return synthesize_mesh(model, self.beta, self.psi[i], (self.head_R, self.head_t), self.neck)


@dataclass
class EnergyWeights:
    landmarks: float = 1.0
    identity: float = 1.0
    expression: float = 1.0
    joints: float = 1.0


@dataclass
class FitConfig:
    iterations: int = 2000
    lr_start: float = 1e-2
    lr_end: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    optimize: tuple = ("beta", "psi", "cameras")
    shared_expression: bool = False
    use_neck: bool = False
    monotone: bool = False
    weights: EnergyWeights = field(default_factory=EnergyWeights)


class _Params:
    """Optimization variables; rotations are axis-angle deltas on the initial state."""

    def __init__(self, state: FitState, cfg: FitConfig):
        self.state0 = state
        opt = set(cfg.optimize)
        n = state.n_images
        self.beta = dc.Tensor(state.beta.copy(), requires_grad="beta" in opt)
        psi0 = state.psi[:1] if cfg.shared_expression else state.psi
        self.psi = dc.Tensor(psi0.copy(), requires_grad="psi" in opt)
        self.cam_w = dc.Tensor(np.zeros((n, 3)), requires_grad="cameras" in opt)
        self.cam_t = dc.Tensor(np.array([c.t for c in state.cameras]), requires_grad="cameras" in opt)
        self.head_w = dc.Tensor(np.zeros(3), requires_grad="head_pose" in opt)
        self.head_t = dc.Tensor(state.head_t.copy(), requires_grad="head_pose" in opt)
        self.neck = dc.Tensor(state.neck.copy(), requires_grad=cfg.use_neck and "neck" in opt)
        self.log_f = dc.Tensor(np.log(state.cameras[0].K.fx), requires_grad="intrinsics" in opt)
        self.shared = cfg.shared_expression
        self.use_neck = cfg.use_neck

    def leaves(self):
        return [p for p in (self.beta, self.psi, self.cam_w, self.cam_t, self.head_w,
                            self.head_t, self.neck, self.log_f) if p.requires_grad]

    def psi_i(self, i):
        return self.psi[0] if self.shared else self.psi[i]

    def to_state(self) -> FitState:
        s0 = self.state0
        R_h = rodrigues(self.head_w.data) @ s0.head_R
        cams = []
        f_scale = np.exp(self.log_f.data) / s0.cameras[0].K.fx
        for i, c in enumerate(s0.cameras):
            K = Intrinsics(c.K.fx * f_scale, c.K.fy * f_scale, c.K.cx, c.K.cy, c.K.width, c.K.height)
            cams.append(Camera(K, rodrigues(self.cam_w.data[i]) @ c.R, self.cam_t.data[i].copy()))
        psi = np.repeat(self.psi.data, s0.n_images, axis=0) if self.shared else self.psi.data.copy()
        return FitState(self.beta.data.copy(), psi, cams, R_h, self.head_t.data.copy(),
                        self.neck.data.copy())


def _energy_terms(p: _Params, model_sub, observations, weights: EnergyWeights, id_mean, id_prec):
    tmpl, B, P, neck_w, pivot = model_sub
    s0 = p.state0
    R_h = rodrigues_t(p.head_w) @ dc.Tensor(s0.head_R)
    R_n = rodrigues_t(p.neck) if p.use_neck else None
    f_scale = dc.exp(p.log_f) / s0.cameras[0].K.fx
    lmk = dc.Tensor(0.0)
    for i, (cam, obs) in enumerate(zip(s0.cameras, observations)):
        V = blend(tmpl, B, P, p.beta, p.psi_i(i))
        if R_n is not None:
            V = apply_neck(V, neck_w, pivot, R_n)
        V = dc.matmul(V, dc.transpose(R_h)) + p.head_t
        R_c = rodrigues_t(p.cam_w[i]) @ dc.Tensor(cam.R)
        Xc = dc.matmul(V, dc.transpose(R_c)) + p.cam_t[i]
        z = Xc[:, 2]
        valid = z.data > 1e-6
        zs = dc.where(valid, z, 1.0)
        u = cam.K.fx * f_scale * Xc[:, 0] / zs + cam.K.cx
        v = cam.K.fy * f_scale * Xc[:, 1] / zs + cam.K.cy
        du, dv = u - obs.mu[:, 0], v - obs.mu[:, 1]
        r2 = (dc.square(du) + dc.square(dv)) / (2.0 * obs.sigma**2)
        lmk = lmk + dc.sum(dc.where(valid, r2, 0.0))
    e_id = _quadratic(p.beta - dc.Tensor(id_mean), id_prec)
    e_exp = dc.sum(dc.square(p.psi))
    e_jnt = dc.sum(dc.square(p.neck)) if p.use_neck else dc.Tensor(0.0)
    terms = {"landmarks": weights.landmarks * lmk, "identity": weights.identity * e_id,
             "expression": weights.expression * e_exp, "joints": weights.joints * e_jnt}
    total = terms["landmarks"] + terms["identity"] + terms["expression"] + terms["joints"]
    return total, terms


def landmark_energy(model: MorphableModel, state: FitState, observations, weights=None,
                    shared_expression: bool = False):
    """Fitting energy and its per-term breakdown (floats)."""
    for obs in observations:
        if np.any(obs.sigma <= 0):
            raise ValueError("landmark sigma must be positive")
    weights = weights or EnergyWeights()
    cfg = FitConfig(optimize=(), shared_expression=shared_expression, use_neck=bool(np.any(state.neck)))
    p = _Params(state, cfg)
    sub = model.landmark_submodel()
    with dc.no_grad():
        total, terms = _energy_terms(p, sub, observations, weights, model.id_mean,
                                     np.linalg.inv(model.id_cov))
    return float(total.data), {k: float(v.data) for k, v in terms.items()}


@dataclass
class FitResult:
    state: FitState
    energy: float
    terms: dict
    history: list
    iterations: int


def fit_landmarks(model: MorphableModel, observations, init: FitState, cfg: FitConfig | None = None) -> FitResult:
    """Minimize the landmark energy from ``init`` with Adam.

    With ``cfg.monotone`` a step is kept only when it does not raise the energy;
    rejected steps are undone and the learning rate is halved for the rest of
    the run.
    """
    cfg = cfg or FitConfig()
    if len(observations) != init.n_images or init.n_images < 1:
        raise ValueError("need one landmark observation per image")
    for obs in observations:
        if np.any(obs.sigma <= 0):
            raise ValueError("landmark sigma must be positive")
    init = init.copy()
    p = _Params(init, cfg)
    leaves = p.leaves()
    sub = model.landmark_submodel()
    prec = np.linalg.inv(model.id_cov)
    opt = Adam(leaves, cfg.lr_start, cfg.beta1, cfg.beta2)
    history = []
    lr_scale = 1.0
    prev = None
    for it in range(cfg.iterations):
        total, _ = _energy_terms(p, sub, observations, cfg.weights, model.id_mean, prec)
        e = float(total.data)
        if not np.isfinite(e):
            raise FitDivergence(it)
        if cfg.monotone and prev is not None and e > prev[0]:
            for leaf, saved in zip(leaves, prev[1]):
                leaf.data[...] = saved
            opt.m, opt.v, opt.t = prev[2]
            lr_scale *= 0.5
            continue
        history.append(e)
        if not leaves:
            break
        grads = dc.backward(total, leaves)
        if cfg.monotone:
            prev = (e, [l.data.copy() for l in leaves],
                    ([m.copy() for m in opt.m], [v.copy() for v in opt.v], opt.t))
        opt.step(grads, lr=lr_scale * exp_decay(it, cfg.iterations, cfg.lr_start, cfg.lr_end))
    state = p.to_state()
    energy, terms = landmark_energy(model, state, observations, cfg.weights, cfg.shared_expression)
    if not np.isfinite(energy):
        raise FitDivergence(cfg.iterations)
    if cfg.monotone and history and energy > history[-1]:
        # last proposed step went uphill; restore the last accepted point
        for leaf, saved in zip(leaves, prev[1]):
            leaf.data[...] = saved
        state = p.to_state()
        energy, terms = landmark_energy(model, state, observations, cfg.weights, cfg.shared_expression)
    history.append(energy)
    return FitResult(state, energy, terms, history, cfg.iterations)


def reprojection_errors(model: MorphableModel, state: FitState, observations) -> np.ndarray:
    """Per-landmark pixel distances between projected model landmarks and observations."""
    errs = []
    for i, (cam, obs) in enumerate(zip(state.cameras, observations)):
        uv, valid = project_landmarks(state.mesh(model, i), cam, model.landmarks)
        errs.append(np.linalg.norm(uv[valid] - obs.mu[valid], axis=1))
    return np.concatenate(errs)


def coarse_init(model: MorphableModel, observations, K: Intrinsics, radius: float = 3.0,
                azimuth_step: float = 15.0, elevations=(-30.0, -15.0, 0.0, 15.0, 30.0, 45.0)) -> FitState:
    """Starting point for :func:`fit_landmarks` when cameras are unknown.

    The mean face is placed at the origin and every image gets the
    origin-facing camera on a sphere of ``radius`` whose landmark projection
    best matches the observations, searched over a grid of directions.
    """
    lmk = synthesize_mesh(model, model.id_mean, np.zeros(model.d_psi))[model.landmarks]
    grid = []
    for el in np.radians(elevations):
        for az in np.radians(np.arange(-180.0, 180.0, azimuth_step)):
            pos = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
            grid.append(Camera(K, *look_at(pos)))
    cams = []
    for obs in observations:
        best, best_e = None, np.inf
        for cam in grid:
            uv, z = cam.project(lmk)
            if np.any(z <= 1e-6):
                continue
            e = np.sum(np.sum((uv - obs.mu) ** 2, axis=1) / obs.sigma ** 2)
            if e < best_e:
                best, best_e = cam, e
        if best is None:
            raise ValueError("no grid camera sees every landmark")
        cams.append(best)
    return FitState(model.id_mean.copy(), np.zeros((len(cams), model.d_psi)), cams)


def save_fit(path, state: FitState) -> None:
    """Write a fit as text: a header block, then one camera/expression block per image."""
    blocks = [[("beta", state.beta), ("head_R", state.head_R), ("head_t", state.head_t),
               ("neck", state.neck)]]
    for i, cam in enumerate(state.cameras):
        blocks.append([("image", i)] + meta.camera_entries(cam) + [("psi", state.psi[i])])
    meta.write_blocks(path, blocks, header="faceprior fit v1")


def load_fit(path) -> FitState:
    head, *images = meta.read_blocks(path)
    images.sort(key=lambda b: b["image"])
    return FitState(head["beta"], np.stack([b["psi"] for b in images]),
                    [meta.camera_from_block(b) for b in images], head["head_R"].reshape(3, 3),
                    head["head_t"], head["neck"])
