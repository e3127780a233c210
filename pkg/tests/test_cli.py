import csv

import numpy as np
import pytest
import yaml

from faceprior.artifacts import RunManifest
from faceprior.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main
from faceprior.field import load_checkpoint
from faceprior.meta import read_blocks
from faceprior.morphable import load_fit
from faceprior.pipeline import PersonalizedModel, read_metrics_csv
from faceprior.render import read_pfm

SMALL = {
    "dataset": {"n_identities": 2, "n_expressions": 1, "n_views": 4, "resolution": 12},
    "field": {"d_w": 4, "n_codes": 2, "pos_levels": 3, "dir_levels": 1, "prop_width": 8,
              "prop_depth": 1, "nerf_width": 16, "nerf_depth": 2, "bottleneck": 8, "view_width": 8},
    "render": {"n_proposal": 8, "n_nerf": 8},
    "prior": {"steps": 4, "batch_rays": 32, "background_steps": 1, "background_fade": 1,
              "collapse_check_steps": 1, "collapse_threshold": 0.0, "log_every": 0,
              "clip_norm": None},
    "invert": {"steps": 2, "patch_size": 6, "patches": 2, "log_every": 0},
    "finetune": {"steps": 2, "batch_rays": 32, "log_every": 0},
    "fit": {"iterations": 50},
    "experiment": {"subject": 7, "scratch_seeds": [0]},
}


def _config(tmp_path, **over):
    data = yaml.safe_load(yaml.safe_dump(SMALL))
    for section, values in over.items():
        data.setdefault(section, {}).update(values)
    p = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.yaml"
    p.write_text(yaml.safe_dump(data))
    return str(p)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """generate -> train-prior -> fit-landmarks -> invert -> finetune, shared by the tests."""
    base = tmp_path_factory.mktemp("cli")
    cfg = _config(base)
    out = {k: str(base / k) for k in ("data", "prior", "fit", "inv", "ft")}
    subj = ["--data", out["data"], "--identity", "1", "--views", "0,1,2"]
    assert main(["generate", "--config", cfg, "--out", out["data"]]) == EXIT_OK
    assert main(["train-prior", "--config", cfg, "--data", out["data"], "--out", out["prior"]]) == EXIT_OK
    ckpt = f"{out['prior']}/prior.cafc"
    assert main(["fit-landmarks", "--config", cfg, "--out", out["fit"], *subj]) == EXIT_OK
    assert main(["invert", "--config", cfg, "--checkpoint", ckpt, "--out", out["inv"], *subj]) == EXIT_OK
    assert main(["finetune", "--config", cfg, "--checkpoint", ckpt, "--w", f"{out['inv']}/w.txt",
                 "--fit", f"{out['fit']}/fit.txt", "--out", out["ft"], *subj]) == EXIT_OK
    out["cfg"], out["base"] = cfg, base
    return out


def test_every_stage_writes_a_complete_manifest(run):
    for stage in ("data", "prior", "fit", "inv", "ft"):
        m = RunManifest.load(run[stage])
        assert m.missing(run[stage]) == []
        assert m.config_hash and m.seed == 0


def test_prior_checkpoint_has_both_codes(run):
    params, extra = load_checkpoint(f"{run['prior']}/prior.cafc")
    assert params["codebook"].shape == (2, 4) and extra["background"] is True


def test_finetuned_model_uses_fitted_cameras(run):
    m = PersonalizedModel.load(f"{run['ft']}/model.cafp")
    fit = load_fit(f"{run['fit']}/fit.txt")
    assert len(m.cameras) == 3 and m.mode == "itw"
    for a, b in zip(m.cameras, fit.cameras):
        np.testing.assert_array_equal(a.R, b.R)
    assert read_blocks(f"{run['inv']}/w.txt")[0]["w"].shape == (4,)


def test_render_outputs(run, tmp_path):
    out = tmp_path / "r"
    assert main(["render", "--config", run["cfg"], "--model", f"{run['ft']}/model.cafp",
                 "--azimuth", "20", "--resolution", "6", "--out", str(out)]) == EXIT_OK
    assert (out / "rgb.png").exists() and (out / "normals.png").exists()
    assert read_pfm(out / "depth.pfm").shape == (6, 6)


def test_evaluate_rejects_training_views(run, tmp_path):
    ckpt = f"{run['prior']}/prior.cafc"
    assert main(["finetune", "--config", run["cfg"], "--checkpoint", ckpt, "--data", run["data"],
                 "--identity", "1", "--views", "0,1", "--out", str(tmp_path / "ft")]) == EXIT_OK
    code = main(["evaluate", "--config", run["cfg"], "--model", str(tmp_path / "ft" / "model.cafp"),
                 "--data", run["data"], "--identity", "1", "--views", "1", "--out", str(tmp_path)])
    assert code == EXIT_INVALID


def test_evaluate_is_reproducible(run, tmp_path):
    args = ["evaluate", "--config", run["cfg"], "--model", f"{run['ft']}/model.cafp",
            "--data", run["data"], "--identity", "1", "--views", "3"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    assert [r["view"] for r in read_metrics_csv(tmp_path / "a" / "metrics.csv")] == ["view3", "mean"]


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("prior:\n  stepz: 3\n")
    assert main(["gradcheck", "--config", str(bad), "--probes", "2"]) == EXIT_INVALID
    assert "prior.stepz" in capsys.readouterr().err


def test_missing_input_exits_2(tmp_path):
    assert main(["train-prior", "--preset", "tiny", "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_unknown_identity_exits_2(run, tmp_path):
    assert main(["invert", "--config", run["cfg"], "--checkpoint", f"{run['prior']}/prior.cafc",
                 "--data", run["data"], "--identity", "9", "--views", "0",
                 "--out", str(tmp_path)]) == EXIT_INVALID


def test_density_collapse_exits_3(run, tmp_path):
    cfg = _config(tmp_path, prior={"collapse_threshold": 1.5})
    assert main(["train-prior", "--config", cfg, "--data", run["data"],
                 "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--preset", "tiny", "--probes", "5", "--out", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 11 and all(line.endswith("status=pass") for line in lines)
    rows = list(csv.DictReader(open(tmp_path / "gradcheck.csv")))
    assert all(float(r["max_rel_error"]) < 1e-4 for r in rows)


def test_ablate_command(run, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", run["cfg"], "--data", run["data"], "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["prior", "scratch", "no_background"]
    assert all(r["status"] in ("ok", "collapsed") for r in rows)
    assert main(["ablate", "--config", run["cfg"], "--data", run["data"], "--variants", "bogus",
                 "--out", str(out)]) == EXIT_INVALID


def test_generate_dry_run(tmp_path, capsys):
    assert main(["generate", "--preset", "tiny", "--dry-run", "--out", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "records=128 identities=8 expressions=2 views=8"
    assert not (tmp_path / "manifest.json").exists()
