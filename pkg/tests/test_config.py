import dataclasses
import io
import json
import logging

import pytest

from faceprior.artifacts import KeyValueFormatter, RunManifest, setup_logging
from faceprior.config import Config, ConfigError, PRESETS, config_from_dict, dump_config, load_config


def _write(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    return p


def test_empty_file_gives_preset_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, ""), "desk")
    assert cfg == config_from_dict({}, "desk")
    assert cfg.dtype == "float32" and cfg.dataset.n_identities == 16
    assert load_config(None) == Config()


def test_file_overrides_preset(tmp_path):
    cfg = load_config(_write(tmp_path, "prior:\n  steps: 7\nseed: 4\n"), "tiny")
    assert cfg.prior.steps == 7 and cfg.seed == 4
    assert cfg.prior.batch_rays == PRESETS["tiny"]["prior"]["batch_rays"]


def test_preset_named_in_file(tmp_path):
    assert load_config(_write(tmp_path, "preset: tiny\n")) == config_from_dict({}, "tiny")


def test_misspelled_key_names_its_path(tmp_path):
    with pytest.raises(ConfigError, match=r"^prior\.stepz: unknown key") as info:
        load_config(_write(tmp_path, "prior:\n  stepz: 3\n"))
    assert "steps" in str(info.value)


def test_type_mismatch_names_its_path(tmp_path):
    with pytest.raises(ConfigError, match=r"^prior\.steps: expected int, got str"):
        load_config(_write(tmp_path, "prior:\n  steps: many\n"))
    with pytest.raises(ConfigError, match=r"^render: expected a mapping"):
        load_config(_write(tmp_path, "render: 3\n"))
    with pytest.raises(ConfigError, match=r"^deterministic: expected bool"):
        config_from_dict({"deterministic": 1})


def test_value_validation_is_reported(tmp_path):
    with pytest.raises(ConfigError, match=r"^prior: "):
        config_from_dict({"prior": {"lr_start": 1e-5, "lr_end": 1e-3}})
    with pytest.raises(ConfigError, match=r"^dtype"):
        config_from_dict({"dtype": "float16"})
    with pytest.raises(ConfigError, match=r"^preset"):
        config_from_dict({}, "huge")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(_write(tmp_path, "a: [1,\n"))


def test_optional_fields_accept_null():
    assert config_from_dict({"prior": {"clip_norm": None}}).prior.clip_norm is None
    assert config_from_dict({"prior": {"clip_norm": 1}}).prior.clip_norm == 1.0


def test_paper_preset_values():
    cfg = config_from_dict({}, "paper")
    assert (cfg.prior.lr_start, cfg.prior.lr_end, cfg.prior.clip_norm) == (0.002, 0.00002, 0.001)
    assert cfg.prior.batch_rays == 131_072 == 256 * 8 * 64
    assert (cfg.prior.beta1, cfg.prior.beta2) == (0.9, 0.999)
    assert cfg.prior.background_steps == 50_000 and cfg.prior.steps == 1_000_000
    assert (cfg.field.d_beta, cfg.field.d_psi, cfg.field.d_w) == (48, 157, 64)
    assert (cfg.render.n_proposal, cfg.render.n_nerf) == (128, 128)
    assert cfg.invert.steps == 1500 and cfg.invert.patches * cfg.invert.patch_size ** 2 == 4096
    assert cfg.finetune.steps == 50_000 and cfg.finetune.batch_rays == 4096


def test_every_preset_builds():
    for name in PRESETS:
        cfg = config_from_dict({}, name)
        assert cfg.field.d_psi == cfg.dataset.d_psi


def test_dump_round_trip_and_hash(tmp_path):
    cfg = config_from_dict({"seed": 9}, "tiny")
    dump_config(cfg, tmp_path / "out.yaml")
    back = load_config(tmp_path / "out.yaml")
    assert back == cfg and back.hash() == cfg.hash()
    assert config_from_dict({"seed": 10}, "tiny").hash() != cfg.hash()


def test_stage_applies_run_seed():
    cfg = config_from_dict({"seed": 5, "deterministic": False}, "tiny")
    st = cfg.stage("finetune")
    assert st.seed == 5 and st.deterministic is False
    assert st.steps == cfg.finetune.steps


# ------------------------------------------------------------------ artifacts

def test_manifest_round_trip(tmp_path):
    (tmp_path / "a.cafc").write_bytes(b"x")
    m = RunManifest(3, "abc", command="train-prior", checkpoints={"prior": "a.cafc"},
                    metrics={"holdout": "m.csv"})
    m.save(tmp_path)
    back = RunManifest.load(tmp_path)
    assert back == m
    assert back.missing(tmp_path) == ["m.csv"]
    assert json.loads((tmp_path / "run.json").read_text())["seed"] == 3


def test_key_value_logging():
    buf = io.StringIO()
    setup_logging("DEBUG", buf)
    logging.getLogger("faceprior.x").info("event=step n=%d", 3)
    logging.getLogger("faceprior.x").warning("plain words")
    lines = buf.getvalue().splitlines()
    assert lines[0] == "level=info logger=faceprior.x event=step n=3"
    assert lines[1] == 'level=warning logger=faceprior.x msg="plain words"'
    setup_logging("WARNING")


def test_formatter_includes_exceptions():
    try:
        raise KeyError("k")
    except KeyError:
        import sys
        rec = logging.LogRecord("faceprior", logging.ERROR, "", 0, "event=fail", None, sys.exc_info())
    assert "exc=" in KeyValueFormatter().format(rec)


def test_config_sections_are_dataclasses():
    assert all(dataclasses.is_dataclass(getattr(Config(), f.name))
               for f in dataclasses.fields(Config) if f.name not in ("seed", "deterministic", "dtype"))
