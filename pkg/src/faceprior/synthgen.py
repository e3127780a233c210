"""Procedural synthetic face dataset.

Builds a seeded morphable head model, samples identities, expressions and
cameras, renders shaded images with alpha mattes and noisy landmarks, and
writes them to disk. Everything is a deterministic function of the seed.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from . import meta
from .camera import Camera, Intrinsics, look_at
from .morphable import LandmarkObservation, MorphableModel, project_landmarks, synthesize_mesh
from .raster import interpolate, rasterize, vertex_normals

log = logging.getLogger(__name__)

DATASET_FORMAT = 1
MIN_VIEW_ANGLE_DEG = 25.0


class InfeasibleCameras(RuntimeError):
    pass


class DegenerateCamera(ValueError):
    pass


# ------------------------------------------------------------------ geometry

def icosphere(subdivisions: int):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]
        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts)
    F = np.array(faces, dtype=np.int64)
    # wind outward: (b - a) x (c - a) points away from the origin
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    F[flip] = F[flip][:, [0, 2, 1]]
    return V, F


def _head_shape(p: np.ndarray) -> np.ndarray:
    """Deform unit-sphere points into a crude head, facing +z, inside the unit ball."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    jaw = 1.0 - 0.18 * np.clip(-y, 0, 1) ** 2
    out = np.stack([0.70 * x * jaw, 0.90 * y, 0.78 * z], axis=1)
    front = np.clip(z, 0, 1)
    nose = 0.16 * np.exp(-(x / 0.13) ** 2 - ((y + 0.05) / 0.22) ** 2) * front ** 2
    brow = 0.03 * np.exp(-((y - 0.22) / 0.08) ** 2) * front
    eyes = -0.04 * (np.exp(-((np.abs(x) - 0.3) / 0.12) ** 2 - ((y - 0.1) / 0.08) ** 2)) * front
    out[:, 2] += nose + brow + eyes
    return out


def _farthest_points(X: np.ndarray, k: int, start: int) -> np.ndarray:
    chosen = [start]
    d = np.linalg.norm(X - X[start], axis=1)
    for _ in range(k - 1):
        i = int(np.argmax(d))
        chosen.append(i)
        d = np.minimum(d, np.linalg.norm(X - X[i], axis=1))
    return np.array(chosen)


def build_model(seed: int, d_beta: int = 8, d_psi: int = 12, n_vertices: int = 642,
                n_landmarks: int = 64, id_budget: float = 0.055,
                exp_budget: float = 0.04) -> MorphableModel:
    """Deterministic morphable head model.

    The template is the smallest icosphere with at least ``n_vertices``
    vertices, deformed into a head shape. Identity columns are smooth
    low-frequency displacement fields over the whole head; expression columns
    are Gaussian-windowed displacements on the lower front of the face. Every
    column has zero mean displacement, and the per-coordinate row norms are
    capped by ``id_budget`` / ``exp_budget`` so codes of norm <= 3 move no
    vertex coordinate by more than ``3 * (id_budget + exp_budget)``.
    """
    if d_beta < 1 or d_psi < 1:
        raise ValueError("code dimensions must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFACE]))
    sub = 0
    while 10 * 4 ** sub + 2 < n_vertices:
        sub += 1
    P, F = icosphere(sub)
    T = _head_shape(P)
    n_v = len(T)

    id_cols = []
    for _ in range(d_beta):
        omega = rng.normal(size=(5, 3))
        omega *= rng.uniform(0.3, 1.1, size=(5, 1)) / np.linalg.norm(omega, axis=1, keepdims=True)
        phase = rng.uniform(0, 2 * np.pi, 5)
        amp = rng.normal(size=5)
        f = (amp * np.cos(2 * np.pi * P @ omega.T + phase)).sum(axis=1)
        A = rng.normal(size=(3, 3))
        A = 0.5 * (A + A.T)
        disp = f[:, None] * P + 0.6 * T @ A.T
        id_cols.append(disp)
    exp_cols = []
    face = np.flatnonzero((P[:, 2] > 0.35) & (P[:, 1] < 0.2) & (P[:, 1] > -0.85))
    for _ in range(d_psi):
        c = T[rng.choice(face)]
        s = rng.uniform(0.12, 0.28)
        d = rng.normal(size=3) * [1.0, 1.5, 0.5]
        d /= np.linalg.norm(d)
        w = np.exp(-np.sum((T - c) ** 2, axis=1) / (2 * s * s))
        exp_cols.append(w[:, None] * d)

    def finish(cols, budget):
        B = np.stack([c - c.mean(axis=0) for c in cols], axis=-1)   # (n_v, 3, d)
        B = B.reshape(3 * n_v, -1)
        return B * (budget / np.linalg.norm(B, axis=1).max())
    B_id = finish(id_cols, id_budget)
    B_exp = finish(exp_cols, exp_budget)

    front = np.flatnonzero(P[:, 2] > -0.1)
    if n_landmarks > len(front):
        raise ValueError(f"model has only {len(front)} front vertices for {n_landmarks} landmarks")
    nose_tip = front[np.argmax(T[front, 2])]
    lmk = front[_farthest_points(T[front], n_landmarks, int(np.flatnonzero(front == nose_tip)[0]))]

    neck_w = np.clip((-T[:, 1] - 0.45) / 0.35, 0, 1)
    neck_w = neck_w * neck_w * (3 - 2 * neck_w)
    return MorphableModel(T, B_id, B_exp, F, lmk, np.zeros(d_beta), np.eye(d_beta),
                          neck_w, np.array([0.0, -0.55, -0.1]))


# ------------------------------------------------------------------- cameras

def sample_cameras(n: int, rng: np.random.Generator, K: Intrinsics,
                   radius_range=(2.7, 3.3), elevation_range=(-45.0, 60.0),
                   azimuth_range=(-180.0, 180.0), min_angle: float = MIN_VIEW_ANGLE_DEG,
                   max_attempts: int = 20000) -> list:
    """Cameras on random spherical coordinates, all looking at the origin.

    A candidate whose viewing direction is within ``min_angle`` degrees of an
    already accepted camera is rejected and redrawn.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    cams, dirs = [], []
    cos_min = np.cos(np.radians(min_angle))
    attempts = 0
    el_lo, el_hi = np.sin(np.radians(elevation_range[0])), np.sin(np.radians(elevation_range[1]))
    while len(cams) < n:
        attempts += 1
        if attempts > max_attempts:
            raise InfeasibleCameras(
                f"placed {len(cams)} of {n} cameras after {max_attempts} attempts; "
                f"{n} views at >= {min_angle} deg separation is infeasible for these ranges")
        az = np.radians(rng.uniform(*azimuth_range))
        el = np.arcsin(rng.uniform(el_lo, el_hi))      # area-uniform in elevation
        r = rng.uniform(*radius_range)
        pos = r * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        view = -pos / r
        if dirs and np.max(np.array(dirs) @ view) > cos_min:
            continue
        dirs.append(view)
        R, t = look_at(pos)
        cams.append(Camera(K, R, t))
    return cams


def camera_at(K: Intrinsics, azimuth_deg: float, elevation_deg: float, radius: float) -> Camera:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    pos = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    R, t = look_at(pos)
    return Camera(K, R, t)


# ---------------------------------------------------------------- appearance

@dataclass
class Lighting:
    direction: tuple = (0.3, 0.5, 0.8)
    ambient: float = 0.45
    diffuse: float = 0.6


@dataclass
class Appearance:
    skin: np.ndarray
    hair: np.ndarray
    hairline: float
    lips: np.ndarray
    freq: np.ndarray
    phase: np.ndarray
    amp: np.ndarray
    cap: np.ndarray | None = None
    frames: np.ndarray | None = None


def sample_appearance(rng: np.random.Generator, accessory_prob: float = 0.0) -> Appearance:
    tone = rng.uniform(0, 1)
    skin = np.array([0.55 + 0.35 * tone, 0.38 + 0.32 * tone, 0.28 + 0.3 * tone])
    skin += rng.normal(0, 0.03, 3)
    hair = rng.choice([np.array([0.12, 0.08, 0.05]), np.array([0.35, 0.22, 0.1]),
                       np.array([0.8, 0.65, 0.35]), np.array([0.5, 0.15, 0.05])])
    hair = np.clip(hair + rng.normal(0, 0.04, 3), 0, 1)
    lips = np.clip(skin * np.array([1.0, 0.6, 0.6]) + rng.normal(0, 0.03, 3), 0, 1)
    freq = rng.normal(size=(4, 3)) * 1.5
    app = Appearance(np.clip(skin, 0, 1), hair, rng.uniform(0.15, 0.5), lips, freq,
                     rng.uniform(0, 2 * np.pi, 4), rng.uniform(0.01, 0.05, 4))
    if rng.uniform() < accessory_prob:
        app.cap = rng.uniform(0.1, 0.9, 3)
    if rng.uniform() < accessory_prob:
        app.frames = rng.uniform(0.0, 0.3, 3)
    return app


def albedo(app: Appearance, T: np.ndarray) -> np.ndarray:
    """Per-vertex albedo from template-space positions, so texture follows the mesh."""
    x, y, z = T[:, 0], T[:, 1], T[:, 2]
    base = np.tile(app.skin, (len(T), 1))
    base += (app.amp * np.sin(T @ app.freq.T * np.pi + app.phase)).sum(axis=1, keepdims=True)
    # hair covers the top and back of the head
    hairline = app.hairline + 0.35 * np.clip(z, 0, 1) - 0.5 * np.clip(-z, 0, 1)
    h = np.clip((y - hairline) / 0.08, 0, 1)[:, None]
    base = (1 - h) * base + h * app.hair
    front = z > 0.3
    eye = front[:, None] * np.exp(-((np.abs(x) - 0.26) / 0.07) ** 2 - ((y - 0.1) / 0.045) ** 2)[:, None]
    base = (1 - eye) * base + eye * np.array([0.12, 0.1, 0.1])
    brow = front[:, None] * np.exp(-((np.abs(x) - 0.26) / 0.11) ** 2 - ((y - 0.24) / 0.03) ** 2)[:, None]
    base = (1 - brow) * base + brow * app.hair
    lip = front[:, None] * np.exp(-(x / 0.17) ** 2 - ((y + 0.4) / 0.05) ** 2)[:, None]
    base = (1 - lip) * base + lip * app.lips
    return np.clip(base, 0, 1)


def accessory_meshes(app: Appearance, template: np.ndarray):
    """Extra rigid geometry attached to the head: a cap shell and glasses frames."""
    out = []
    if app.cap is not None:
        P, F = icosphere(2)
        V = _head_shape(P) * 1.1
        keep = P[:, 1] > 0.35
        F = F[np.all(keep[F], axis=1)]
        out.append((V, F, np.tile(app.cap, (len(V), 1))))
    if app.frames is not None:
        ring = np.linspace(0, 2 * np.pi, 13)[:-1]
        zf = template[:, 2].max() - 0.02
        verts, faces = [], []
        for cx in (-0.26, 0.26):
            base = len(verts)
            for a in ring:
                for r in (0.1, 0.135):
                    verts.append((cx + r * np.cos(a), 0.1 + r * np.sin(a), zf))
            m = len(ring)
            for k in range(m):
                i0, o0 = base + 2 * k, base + 2 * k + 1
                i1, o1 = base + 2 * ((k + 1) % m), base + 2 * ((k + 1) % m) + 1
                faces += [(i0, o0, o1), (i0, o1, i1)]
        V = np.array(verts)
        out.append((V, np.array(faces), np.tile(app.frames, (len(V), 1))))
    return out


# ----------------------------------------------------------------- rendering

@dataclass
class SceneSpec:
    identity: int
    beta: np.ndarray
    psis: list                      # one expression code per expression
    cameras: list                   # per expression, a list of Camera
    appearance: Appearance
    lighting: Lighting = field(default_factory=Lighting)


@dataclass
class DatasetRecord:
    image: np.ndarray               # (H, W, 3) in [0, 1], background included
    alpha: np.ndarray               # (H, W) in [0, 1]
    camera: Camera
    beta: np.ndarray
    psi: np.ndarray
    landmarks: LandmarkObservation
    identity: int
    expression: int
    view: int


def render_view(model: MorphableModel, beta, psi, camera: Camera, app: Appearance,
                lighting: Lighting, background=(0.85, 0.85, 0.85), supersample: int = 1):
    """Shaded image and alpha of one head under one camera."""
    V = synthesize_mesh(model, beta, psi)
    meshes = [(V, model.triangles, albedo(app, model.template))] + accessory_meshes(app, model.template)
    verts = np.concatenate([m[0] for m in meshes])
    offs = np.cumsum([0] + [len(m[0]) for m in meshes])[:-1]
    tris = np.concatenate([m[1] + o for m, o in zip(meshes, offs)])
    cols = np.concatenate([m[2] for m in meshes])
    normals = vertex_normals(verts, tris)

    W, H = camera.K.width * supersample, camera.K.height * supersample
    cam = camera.scaled(W, H)
    uv, z = cam.project(verts)
    if np.all(z[: len(V)] <= 1e-3):
        raise DegenerateCamera("head is entirely behind the camera")
    tri_id, bary, _ = rasterize(uv, z, tris, W, H)
    mask = tri_id >= 0
    if not mask.any():
        raise DegenerateCamera("head does not intersect the view frustum")
    n = interpolate(normals, tris, tri_id, bary)
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    a = interpolate(cols, tris, tri_id, bary)
    ldir = np.asarray(lighting.direction, float)
    ldir = ldir / np.linalg.norm(ldir)
    shade = lighting.ambient + lighting.diffuse * np.clip(n @ ldir, 0, None)
    fg = np.clip(a * shade[..., None], 0, 1)
    alpha = mask.astype(float)
    img = np.where(mask[..., None], fg, np.asarray(background, float))
    if supersample > 1:
        s = supersample
        img = img.reshape(H // s, s, W // s, s, 3).mean(axis=(1, 3))
        alpha = alpha.reshape(H // s, s, W // s, s).mean(axis=(1, 3))
    return img, alpha


def render_scene(model: MorphableModel, spec: SceneSpec, rng: np.random.Generator,
                 landmark_sigma: float = 0.5, landmark_noise: float = 0.5,
                 background=(0.85, 0.85, 0.85), supersample: int = 1) -> list:
    """Render every (expression, view) of one identity."""
    records = []
    for e, (psi, cams) in enumerate(zip(spec.psis, spec.cameras)):
        V = synthesize_mesh(model, spec.beta, psi)
        for v, cam in enumerate(cams):
            img, alpha = render_view(model, spec.beta, psi, cam, spec.appearance, spec.lighting,
                                     background, supersample)
            uv, valid = project_landmarks(V, cam, model.landmarks)
            if not valid.all():
                raise DegenerateCamera("landmark behind the camera")
            mu = uv + rng.normal(0, landmark_noise, uv.shape) if landmark_noise > 0 else uv
            obs = LandmarkObservation(mu, np.full(len(mu), landmark_sigma))
            records.append(DatasetRecord(img, alpha, cam, np.array(spec.beta), np.array(psi),
                                         obs, spec.identity, e, v))
    return records


# ------------------------------------------------------------------- dataset

@dataclass
class SynthConfig:
    seed: int = 0
    n_identities: int = 16
    n_expressions: int = 4
    n_views: int = 12
    resolution: int = 64
    fov_deg: float = 45.0
    radius_range: tuple = (2.7, 3.3)
    elevation_range: tuple = (-45.0, 60.0)
    azimuth_range: tuple = (-180.0, 180.0)
    d_beta: int = 8
    d_psi: int = 12
    n_vertices: int = 642
    n_landmarks: int = 64
    landmark_sigma: float = 0.5
    landmark_noise: float = 0.5
    accessory_prob: float = 0.0
    diverse_lighting: bool = False
    background: tuple = (0.85, 0.85, 0.85)
    supersample: int = 1
    model_seed: int = 0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.fov_deg, self.resolution, self.resolution)

    @property
    def n_records(self) -> int:
        return self.n_identities * self.n_expressions * self.n_views


def identity_rng(seed: int, identity: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, identity]))


def make_scene(cfg: SynthConfig, identity: int, rng: np.random.Generator) -> SceneSpec:
    beta = rng.normal(size=cfg.d_beta)
    psis = [rng.normal(size=cfg.d_psi) for _ in range(cfg.n_expressions)]
    K = cfg.intrinsics()
    cams = [sample_cameras(cfg.n_views, rng, K, cfg.radius_range, cfg.elevation_range,
                           cfg.azimuth_range) for _ in range(cfg.n_expressions)]
    app = sample_appearance(rng, cfg.accessory_prob)
    light = Lighting()
    if cfg.diverse_lighting:
        d = rng.normal(size=3)
        d[2] = abs(d[2])
        light = Lighting(tuple(d / np.linalg.norm(d)))
    return SceneSpec(identity, beta, psis, cams, app, light)


def render_subject(model: MorphableModel, cfg: SynthConfig, identity: int, cameras: list,
                   expression: int = 0) -> list:
    """Records of one generated identity and expression seen from the given cameras."""
    spec = make_scene(cfg, identity, identity_rng(cfg.seed, identity))
    spec = SceneSpec(identity, spec.beta, [spec.psis[expression]], [list(cameras)],
                     spec.appearance, spec.lighting)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, identity, expression, 0x5B]))
    recs = render_scene(model, spec, rng, cfg.landmark_sigma, cfg.landmark_noise,
                        cfg.background, cfg.supersample)
    for r in recs:
        r.expression = expression
    return recs


def record_paths(root, identity: int, expression: int, view: int):
    base = os.path.join(root, f"{identity:04d}", f"{expression:02d}", f"{view:02d}")
    return base + ".png", base + ".alpha.png", base + ".meta"


def write_record(root, rec: DatasetRecord) -> None:
    img_p, alpha_p, meta_p = record_paths(root, rec.identity, rec.expression, rec.view)
    os.makedirs(os.path.dirname(img_p), exist_ok=True)
    Image.fromarray(np.round(rec.image * 255).astype(np.uint8)).save(img_p)
    Image.fromarray(np.round(rec.alpha * 255).astype(np.uint8)).save(alpha_p)
    entries = [("identity", rec.identity), ("expression", rec.expression), ("view", rec.view)]
    entries += meta.camera_entries(rec.camera)
    entries += [("beta", rec.beta), ("psi", rec.psi), ("landmarks_mu", rec.landmarks.mu),
                ("landmarks_sigma", rec.landmarks.sigma)]
    meta.write_blocks(meta_p, [entries], header=f"faceprior record v{DATASET_FORMAT}")


def read_record(root, identity: int, expression: int, view: int) -> DatasetRecord:
    img_p, alpha_p, meta_p = record_paths(root, identity, expression, view)
    img = np.asarray(Image.open(img_p), dtype=float) / 255.0
    alpha = np.asarray(Image.open(alpha_p), dtype=float) / 255.0
    b = meta.read_blocks(meta_p)[0]
    obs = LandmarkObservation(b["landmarks_mu"].reshape(-1, 2), b["landmarks_sigma"])
    return DatasetRecord(img, alpha, meta.camera_from_block(b), b["beta"], b["psi"], obs,
                         b["identity"], b["expression"], b["view"])


def generate_dataset(cfg: SynthConfig, root=None, dry_run: bool = False) -> dict:
    """Render and write the dataset; returns the manifest.

    Each identity is rendered into a temporary directory and renamed into
    place, so an interrupted run leaves only complete identities and a rerun
    skips them. ``dry_run`` only counts records.
    """
    manifest = {"format": DATASET_FORMAT, "seed": cfg.seed, "n_records": cfg.n_records,
                "counts": {"identities": cfg.n_identities, "expressions": cfg.n_expressions,
                           "views": cfg.n_views},
                "config": _jsonable(asdict(cfg))}
    if dry_run:
        return manifest
    os.makedirs(root, exist_ok=True)
    model = build_model(cfg.model_seed, cfg.d_beta, cfg.d_psi, cfg.n_vertices, cfg.n_landmarks)
    model.save(os.path.join(root, "model.cafm"))
    identities, records = [], []
    for i in range(cfg.n_identities):
        rng = identity_rng(cfg.seed, i)
        spec = make_scene(cfg, i, rng)
        final = os.path.join(root, f"{i:04d}")
        if not os.path.isdir(final):
            tmp = os.path.join(root, f".tmp-{i:04d}")
            shutil.rmtree(tmp, ignore_errors=True)
            for rec in render_scene(model, spec, rng, cfg.landmark_sigma, cfg.landmark_noise,
                                    cfg.background, cfg.supersample):
                write_record(tmp, rec)
            os.rename(os.path.join(tmp, f"{i:04d}"), final)
            shutil.rmtree(tmp)
            log.info("event=identity_written identity=%d", i)
        identities.append({"identity": i, "beta": spec.beta.tolist(),
                           "psi": [p.tolist() for p in spec.psis]})
        for e in range(cfg.n_expressions):
            for v in range(cfg.n_views):
                records.append(os.path.relpath(record_paths(root, i, e, v)[0], root))
    manifest["identities"] = identities
    manifest["records"] = records
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def load_manifest(root) -> dict:
    with open(os.path.join(root, "manifest.json")) as f:
        return json.load(f)
