"""Code-conditioned radiance field.

Two multilayer perceptrons share one conditioning scheme: a density-only
proposal network and the main radiance network. Every hidden layer sees the
previous activations concatenated with the per-ray condition vector
``(beta, psi, w)``; the concatenation is implemented as two weight blocks,
``w`` for the activations and ``c`` for the codes, so the code product is
computed once per ray instead of once per sample.

Radiance network layout::

    posenc(s * x) -> [relu(linear(. || codes))] x depth -> trunk
    trunk -> softplus(linear + shift)         density
    trunk -> normalize(linear)                 predicted outward normal
    trunk -> linear                            bottleneck
    (bottleneck || posenc(d) || d) -> relu(linear) -> sigmoid(linear)   color

Density is computed before the view direction enters, so it cannot depend
on it. Positions are multiplied by ``pos_scale`` before encoding so the
scene bounds stay inside one period of the lowest frequency.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc

CHECKPOINT_MAGIC = b"CAFC"
CHECKPOINT_VERSION = 1
CONDITION_ORDER = "posenc(x),beta,psi,w"
GRAD_EPS = 1e-8


@dataclass
class FieldConfig:
    d_beta: int = 8
    d_psi: int = 12
    d_w: int = 16
    n_codes: int = 16
    pos_levels: int = 12
    dir_levels: int = 4
    pos_scale: float = 0.5
    prop_width: int = 64
    prop_depth: int = 4
    nerf_width: int = 128
    nerf_depth: int = 8
    bottleneck: int = 64
    view_width: int = 32
    density_shift: float = -1.0
    code_init_std: float = 0.01

    @property
    def d_code(self) -> int:
        return self.d_beta + self.d_psi + self.d_w

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown field config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------- encoding

def posenc(x, levels: int):
    """Frequency encoding, component-major.

    For each input component the output holds ``sin(2^k pi x)`` for
    ``k = 0..levels-1`` followed by the matching cosines, so the length is
    ``2 * levels * dim(x)``.
    """
    x = dc._lift(x)
    freqs = np.pi * 2.0 ** np.arange(levels)
    xs = dc.reshape(x, x.shape + (1,)) * freqs
    enc = dc.concat([dc.sin(xs), dc.cos(xs)], axis=-1)
    return dc.reshape(enc, x.shape[:-1] + (2 * levels * x.shape[-1],))


def posenc_jacobian(x: np.ndarray, levels: int, scale: float = 1.0) -> np.ndarray:
    """d posenc(scale * x) / dx as ``(dim, ..., 2 * levels * dim)`` (one slab per input axis)."""
    x = np.asarray(x, dtype=float)
    D = x.shape[-1]
    freqs = np.pi * 2.0 ** np.arange(levels)
    xs = scale * x[..., None] * freqs
    blocks = np.concatenate([np.cos(xs) * freqs, -np.sin(xs) * freqs], axis=-1) * scale
    out = np.zeros((D,) + x.shape[:-1] + (D, 2 * levels))
    for j in range(D):
        out[j, ..., j, :] = blocks[..., j, :]
    return out.reshape((D,) + x.shape[:-1] + (2 * levels * D,))


# ----------------------------------------------------------------- parameters

def _he_uniform(rng, fan_in, shape):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


class FieldParams:
    """Named weight leaves of both networks plus the latent codebook."""

    def __init__(self, cfg: FieldConfig, tensors: dict, code_ids=None):
        self.cfg = cfg
        self.tensors = tensors
        n = tensors["codebook"].shape[0]
        self.code_ids = np.arange(n) if code_ids is None else np.asarray(code_ids, dtype=np.int64)

    @classmethod
    def init(cls, cfg: FieldConfig, seed: int = 0) -> "FieldParams":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1E1D]))
        t = {}
        pe = 2 * cfg.pos_levels * 3
        de = 2 * cfg.dir_levels * 3 + 3

        def dense(name, n_in, n_out, n_code=0):
            fan = n_in + n_code
            t[f"{name}.w"] = _he_uniform(rng, fan, (n_in, n_out))
            if n_code:
                t[f"{name}.c"] = _he_uniform(rng, fan, (n_code, n_out))
            t[f"{name}.b"] = np.zeros(n_out)

        prev = pe
        for i in range(cfg.prop_depth):
            dense(f"prop.l{i}", prev, cfg.prop_width, cfg.d_code)
            prev = cfg.prop_width
        dense("prop.sigma", prev, 1)
        prev = pe
        for i in range(cfg.nerf_depth):
            dense(f"nerf.l{i}", prev, cfg.nerf_width, cfg.d_code)
            prev = cfg.nerf_width
        dense("nerf.sigma", prev, 1)
        dense("nerf.normal", prev, 3)
        dense("nerf.bottleneck", prev, cfg.bottleneck)
        fan = cfg.bottleneck + de
        t["nerf.view.wb"] = _he_uniform(rng, fan, (cfg.bottleneck, cfg.view_width))
        t["nerf.view.wd"] = _he_uniform(rng, fan, (de, cfg.view_width))
        t["nerf.view.b"] = np.zeros(cfg.view_width)
        dense("nerf.rgb", cfg.view_width, 3)
        t["codebook"] = rng.normal(0.0, cfg.code_init_std, size=(cfg.n_codes, cfg.d_w))
        return cls(cfg, {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in t.items()})

    def __getitem__(self, name) -> dc.Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def leaves(self, include_codebook: bool = True) -> list:
        return [v for k, v in self.tensors.items() if include_codebook or k != "codebook"]

    def copy(self) -> "FieldParams":
        return FieldParams(self.cfg, {k: dc.Tensor(v.data.copy(), requires_grad=True, name=k)
                                      for k, v in self.tensors.items()}, self.code_ids.copy())

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.tensors.items()}

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    # -- codebook
    def code_row(self, identity) -> int:
        hits = np.flatnonzero(self.code_ids == identity)
        if len(hits) == 0:
            raise IndexError(f"identity {identity} is not in the codebook")
        return int(hits[0])

    def codebook_get(self, identity) -> np.ndarray:
        return self.tensors["codebook"].data[self.code_row(identity)].copy()

    def codebook_set(self, identity, w) -> None:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.cfg.d_w,):
            raise ValueError(f"code must have shape ({self.cfg.d_w},)")
        self.tensors["codebook"].data[self.code_row(identity)] = w

    def codes_for(self, identities) -> dc.Tensor:
        """Codebook rows for a batch of identities (a differentiable gather)."""
        return self.tensors["codebook"][self.code_rows(identities)]

    def code_rows(self, identities) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(identities, dtype=np.int64))
        order = np.argsort(self.code_ids, kind="stable")
        pos = np.clip(np.searchsorted(self.code_ids, ids, sorter=order), 0, len(order) - 1)
        rows = order[pos]
        bad = self.code_ids[rows] != ids
        if bad.any():
            raise IndexError(f"identity {ids[bad][0]} is not in the codebook")
        return rows


def view_weights(params: FieldParams) -> dc.Tensor:
    """The weights that read the encoded view direction."""
    return params["nerf.view.wd"]


# -------------------------------------------------------------------- queries

def condition(beta, psi, w) -> dc.Tensor:
    """Per-ray condition vector ``(beta || psi || w)``; every argument is ``(R, d)``."""
    return dc.concat([dc._lift(beta), dc._lift(psi), dc._lift(w)], axis=-1)


def _layer(params, name, h, code_term, tangent=None):
    a = dc.matmul(h, params[f"{name}.w"]) + code_term + params[f"{name}.b"]
    out = dc.relu(a)
    if tangent is not None:
        tangent = dc.matmul(tangent, params[f"{name}.w"]) * (a.data > 0)
    return out, tangent


def _code_terms(params, prefix, depth, codes):
    codes = dc._lift(codes)
    if codes.shape[-1] != params.cfg.d_code:
        raise ValueError(f"condition has dim {codes.shape[-1]}, expected {params.cfg.d_code}")
    return [dc.reshape(dc.matmul(codes, params[f"{prefix}.l{i}.c"]), (codes.shape[0], 1, -1))
            for i in range(depth)]


def _check_points(x):
    x = np.asarray(x.data if isinstance(x, dc.Tensor) else x)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"points must be (rays, samples, 3), got {x.shape}")
    return x


def query_proposal(params: FieldParams, x, codes) -> dc.Tensor:
    """Proposal density at points ``x (R, S, 3)`` for per-ray ``codes (R, d_code)``."""
    cfg = params.cfg
    x = _check_points(x)
    h = posenc(cfg.pos_scale * x, cfg.pos_levels)
    for i, ct in enumerate(_code_terms(params, "prop", cfg.prop_depth, codes)):
        h, _ = _layer(params, f"prop.l{i}", h, ct)
    raw = dc.matmul(h, params["prop.sigma.w"]) + params["prop.sigma.b"]
    return dc.softplus(raw[..., 0] + cfg.density_shift)


@dataclass
class FieldSample:
    sigma: dc.Tensor              # (R, S)
    color: dc.Tensor              # (R, S, 3)
    normal: dc.Tensor             # (R, S, 3) predicted, unit
    grad_sigma: dc.Tensor | None = None   # (R, S, 3) when requested


def query_nerf(params: FieldParams, x, d, codes, with_gradient: bool = False) -> FieldSample:
    """Radiance network at ``x (R, S, 3)`` viewed along unit ``d (R, 3)``.

    With ``with_gradient`` the spatial density gradient is carried alongside
    as forward-mode tangents built from graph operations, so it can itself be
    differentiated with respect to the weights.
    """
    cfg = params.cfg
    x = _check_points(x)
    d = np.asarray(d, dtype=float)
    R, S = x.shape[:2]
    h = posenc(cfg.pos_scale * x, cfg.pos_levels)
    tan = dc.Tensor(posenc_jacobian(x, cfg.pos_levels, cfg.pos_scale)) if with_gradient else None
    for i, ct in enumerate(_code_terms(params, "nerf", cfg.nerf_depth, codes)):
        h, tan = _layer(params, f"nerf.l{i}", h, ct, tan)
    raw = dc.matmul(h, params["nerf.sigma.w"])[..., 0] + params["nerf.sigma.b"][0] + cfg.density_shift
    sigma = dc.softplus(raw)
    grad = None
    if with_gradient:
        dsig = dc.matmul(tan, params["nerf.sigma.w"])[..., 0] * dc.sigmoid(raw)   # (3, R, S)
        grad = dc.transpose(dsig, (1, 2, 0))
    normal = dc.normalize(dc.matmul(h, params["nerf.normal.w"]) + params["nerf.normal.b"])
    bottleneck = dc.matmul(h, params["nerf.bottleneck.w"]) + params["nerf.bottleneck.b"]
    denc = np.concatenate([posenc(d, cfg.dir_levels).data, d], axis=-1)          # (R, de)
    dterm = dc.reshape(dc.matmul(dc.Tensor(denc), params["nerf.view.wd"]), (R, 1, -1))
    hv = dc.relu(dc.matmul(bottleneck, params["nerf.view.wb"]) + dterm + params["nerf.view.b"])
    color = dc.sigmoid(dc.matmul(hv, params["nerf.rgb.w"]) + params["nerf.rgb.b"])
    return FieldSample(sigma, color, normal, grad)


def normals_from_gradient(grad):
    """Outward unit normals ``-grad / |grad|`` and a mask of usable samples."""
    grad = dc._lift(grad)
    norm = np.linalg.norm(grad.data, axis=-1)
    valid = norm > GRAD_EPS
    return -dc.normalize(grad), valid


def analytic_normal(params: FieldParams, x, codes):
    """Outward normals of the radiance network's density at ``x (R, S, 3)``."""
    R = np.asarray(x).shape[0]
    s = query_nerf(params, x, np.tile([0.0, 0.0, 1.0], (R, 1)), codes, with_gradient=True)
    return normals_from_gradient(s.grad_sigma)


def density_gradient(sigma_fn, x: np.ndarray) -> np.ndarray:
    """Spatial gradient of a pointwise density function by reverse mode."""
    xt = dc.Tensor(np.asarray(x, dtype=float), requires_grad=True)
    return dc.backward(dc.sum(sigma_fn(xt)), [xt])[0]


# ----------------------------------------------------------------- checkpoint

def checkpoint_bytes(params: FieldParams, extra: dict | None = None) -> bytes:
    """Serialize weights, codebook identity table, and a JSON config block.

    Layout: magic, u32 version, u32 config length, UTF-8 JSON config, u32
    array count, then per array: u16 name length, name, u8 ndim, u32 dims,
    little-endian float64 data. Last comes the u32 identity count and the
    int64 identity ids of the codebook rows.
    """
    block = {"field": asdict(params.cfg), "condition_order": CONDITION_ORDER,
             "extra": extra or {}}
    cfg = json.dumps(block, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(cfg)) + cfg)
    out.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim))
        out.write(struct.pack(f"<{t.ndim}I", *t.shape))
        out.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    out.write(struct.pack("<I", len(params.code_ids)))
    out.write(np.ascontiguousarray(params.code_ids, dtype="<i8").tobytes())
    return out.getvalue()


def checkpoint_from_bytes(blob: bytes):
    """Inverse of :func:`checkpoint_bytes`; returns ``(params, extra)``."""
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a field checkpoint (bad magic)")
    buf = memoryview(blob)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError("truncated field checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, clen = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported field checkpoint version {version}")
    block = json.loads(bytes(take(clen)))
    if block.get("condition_order") != CONDITION_ORDER:
        raise ValueError("checkpoint uses a different conditioning order")
    cfg = FieldConfig.from_dict(block["field"])
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape))
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = dc.Tensor(data, requires_grad=True, name=name)
    (n_ids,) = struct.unpack("<I", take(4))
    ids = np.frombuffer(take(8 * n_ids), dtype="<i8").astype(np.int64)
    if pos != len(blob):
        raise ValueError("trailing bytes after field checkpoint")
    return FieldParams(cfg, tensors, ids), block["extra"]


def save_checkpoint(path, params: FieldParams, extra: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params, extra))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
