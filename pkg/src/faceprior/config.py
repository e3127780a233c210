"""Run configuration: nested dataclasses, YAML loading and named presets.

A config file is a YAML mapping whose top-level sections mirror
:class:`Config`. Values override the selected preset; keys that do not
exist, values of the wrong type and malformed sections are rejected with the
dotted path of the offending key.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass

import yaml

from .field import FieldConfig
from .losses import LossWeights
from .morphable import FitConfig
from .pipeline import TrainConfig
from .render import RenderConfig
from .synthgen import SynthConfig


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the dotted key path."""


@dataclass
class ExperimentConfig:
    """Camera layout of the few-shot subject used by ``ablate`` and ``evaluate``."""
    subject: int = 1000                   # generator identity index, outside the training range
    radius: float = 3.0
    inputs: list = dataclasses.field(default_factory=lambda: [[0.0, 10.0], [-45.0, 5.0], [45.0, 5.0]])
    holdout: list = dataclasses.field(default_factory=lambda: [[-20.0, 20.0], [20.0, -10.0], [0.0, -20.0]])
    train_identities: int | None = None   # None uses every dataset identity
    mode: str = "studio"
    scratch_seeds: list = dataclasses.field(default_factory=lambda: [0, 1, 2])


@dataclass
class Config:
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float64"
    dataset: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    losses: LossWeights = dataclasses.field(default_factory=LossWeights)
    prior: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    invert: TrainConfig = dataclasses.field(default_factory=lambda: TrainConfig(steps=500, background_steps=0))
    finetune: TrainConfig = dataclasses.field(default_factory=lambda: TrainConfig(steps=3000, background_steps=0))
    fit: FitConfig = dataclasses.field(default_factory=FitConfig)
    experiment: ExperimentConfig = dataclasses.field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage(self, name: str) -> TrainConfig:
        """A training stage with the run-level seed and determinism applied."""
        return dataclasses.replace(getattr(self, name), seed=self.seed,
                                   deterministic=self.deterministic)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


# -------------------------------------------------------------------- presets

PRESETS = {
    # Canonical values. Prior: Adam (0.9, 0.999), lr decayed exponentially
    # from 0.002 to 0.00002, gradients clipped at norm 0.001, 131,072 rays per
    # step (256 identities x 8 views x 64 pixels) for 1 Mio. steps, the first
    # 50,000 with background. Dataset: 1,500 identities, 13 expressions,
    # 30 views. Architecture: beta 48, psi 157, w 64; proposal 4 x 256, NeRF
    # 8 x 1024, bottleneck 256, view layer 128; 12 position and 4 direction
    # frequency levels; 128 proposal and 128 NeRF samples. Inversion: 1,500
    # steps on 4 patches of 32 x 32 (4096 rays). Fine-tuning: 50,000 steps of
    # 4096 individual rays with the same optimizer.
    "paper": {
        "dataset": {"n_identities": 1500, "n_expressions": 13, "n_views": 30, "resolution": 64,
                    "d_beta": 48, "d_psi": 157},
        "field": {"d_beta": 48, "d_psi": 157, "d_w": 64, "n_codes": 1500, "pos_levels": 12,
                  "dir_levels": 4, "prop_width": 256, "prop_depth": 4, "nerf_width": 1024,
                  "nerf_depth": 8, "bottleneck": 256, "view_width": 128},
        "render": {"n_proposal": 128, "n_nerf": 128},
        "prior": {"steps": 1_000_000, "batch_rays": 131_072, "lr_start": 0.002, "lr_end": 0.00002,
                  "clip_norm": 0.001, "background_steps": 50_000},
        "invert": {"steps": 1500, "batch_rays": 4096, "patch_size": 32, "patches": 4,
                   "lr_start": 0.002, "lr_end": 0.00002, "clip_norm": 0.001, "background_steps": 0},
        "finetune": {"steps": 50_000, "batch_rays": 4096, "lr_start": 0.002, "lr_end": 0.00002,
                     "clip_norm": 0.001, "background_steps": 0},
    },
    # Workstation scale: 16 identities x 4 expressions x 12 views at 64 px.
    "desk": {
        "dtype": "float32",
        "dataset": {"n_identities": 16, "n_expressions": 4, "n_views": 12, "resolution": 64},
        "field": {"n_codes": 16},
        "prior": {"steps": 20_000, "batch_rays": 4096, "background_steps": 2000,
                  "background_fade": 2000},
        "invert": {"steps": 500, "batch_rays": 4096, "patch_size": 32, "patches": 4,
                   "background_steps": 0},
        "finetune": {"steps": 3000, "batch_rays": 4096, "background_steps": 0},
    },
    # Single-core sandbox scale used by the acceptance suite.
    "tiny": {
        "dtype": "float32",
        "dataset": {"n_identities": 8, "n_expressions": 2, "n_views": 8, "resolution": 32},
        "field": {"d_w": 8, "n_codes": 8, "pos_levels": 6, "dir_levels": 2, "prop_width": 32,
                  "prop_depth": 2, "nerf_width": 64, "nerf_depth": 3, "bottleneck": 32,
                  "view_width": 16},
        "render": {"n_proposal": 16, "n_nerf": 24},
        "prior": {"steps": 1500, "batch_rays": 1024, "background_steps": 300, "background_fade": 300,
                  "clip_norm": None, "collapse_check_steps": 50},
        "invert": {"steps": 100, "batch_rays": 1024, "patch_size": 16, "patches": 4,
                   "lr_start": 0.1, "lr_end": 0.01, "clip_norm": None, "background_steps": 0},
        "finetune": {"steps": 300, "batch_rays": 1024, "lr_start": 0.002, "lr_end": 0.0002,
                     "clip_norm": None, "background_steps": 0},
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for alt in typing.get_args(hint):
            try:
                return _check_type(value, alt, path)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0]
    if hint is type(None):
        if value is None:
            return None
        raise ConfigError(f"{path}: expected null, got {type(value).__name__}")
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint in (tuple, list) or origin in (tuple, list):
        if isinstance(value, (list, tuple)):
            return tuple(value) if (hint is tuple or origin is tuple) else list(value)
    elif dataclasses.is_dataclass(hint):
        return _build(hint, value, f"{path}.")
    else:
        return value
    raise ConfigError(f"{path}: expected {getattr(hint, '__name__', hint)}, "
                      f"got {type(value).__name__} {value!r}")


def _build(cls, data, path: str = ""):
    where = path.rstrip(".") or "<root>"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in fields:
            known = ", ".join(sorted(fields))
            raise ConfigError(f"{path}{k}: unknown key (known keys: {known})")
    kwargs = {}
    for name, f in fields.items():
        if name in data:
            kwargs[name] = _check_type(data[name], hints[name], f"{path}{name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{path}{name}: required key is missing")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict | None, preset: str | None = None) -> Config:
    """Build a config from ``data`` layered over ``preset`` (or plain defaults)."""
    data = dict(data or {})
    file_preset = data.pop("preset", None)
    preset = preset or file_preset
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r} (known: {', '.join(PRESETS)})")
    merged = _merge(PRESETS[preset], data) if preset else data
    cfg = _build(Config, merged)
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype: expected float32 or float64, got {cfg.dtype!r}")
    if cfg.field.d_beta != cfg.dataset.d_beta or cfg.field.d_psi != cfg.dataset.d_psi:
        raise ConfigError("field.d_beta: field and dataset code dimensions differ")
    return cfg


def load_config(path=None, preset: str | None = None) -> Config:
    """Read a YAML config file (``None`` or an empty file means all defaults)."""
    data = {}
    if path is not None:
        with open(path) as f:
            try:
                data = yaml.safe_load(f)
            except yaml.YAMLError as exc:
                raise ConfigError(f"<root>: not valid YAML: {exc}") from exc
        if data is None:
            data = {}
    return config_from_dict(data, preset)


def dump_config(cfg: Config, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)

