"""Command-line entry point: ``faceprior <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure
(density collapse, divergence, non-finite values).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import diffcore as dc
from .artifacts import RunManifest, apply_precision, setup_logging
from .config import Config, ConfigError, PRESETS, dump_config, load_config
from .field import load_checkpoint, save_checkpoint
from .losses import psnr
from .meta import read_blocks, write_blocks
from .morphable import (MorphableModel, coarse_init, fit_landmarks, load_fit, reprojection_errors,
                        save_fit)
from .pipeline import (DensityCollapse, PersonalizedModel, View, downscale, evaluate,
                       few_shot, finetune, invert, load_views, render_novel_view, scratch_params,
                       train_prior, write_metrics_csv)
from .render import write_normals_png, write_pfm, write_png
from .synthgen import SynthConfig, camera_at, generate_dataset, load_manifest, render_subject

log = logging.getLogger("faceprior.cli")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _ints(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset the config overrides")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="seeded, reproducible sampling (default from config)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--log-level", default="INFO")


def _subject(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--identity", type=int, required=True)
    p.add_argument("--expression", type=int, default=0)
    p.add_argument("--views", type=_ints, required=True, help="comma-separated view indices")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faceprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the synthetic training dataset")
    _common(p)
    p.add_argument("--dry-run", action="store_true", help="only report record counts")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-prior", help="train the conditional prior on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--no-background", action="store_true", help="skip the background phase")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("fit-landmarks", help="recover cameras and codes from landmarks")
    _common(p)
    _subject(p)
    p.set_defaults(func=cmd_fit_landmarks)

    p = sub.add_parser("invert", help="find the latent code of a subject")
    _common(p)
    _subject(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fit", help="fit file from fit-landmarks (default: dataset ground truth)")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("finetune", help="fine-tune the prior on a few views")
    _common(p)
    _subject(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--w", help="latent file from invert (default: zero code)")
    p.add_argument("--fit")
    p.add_argument("--mode", choices=("studio", "itw"), default="itw")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("render", help="render a personalized model from a new camera")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--resolution", type=int, help="output size (default: input camera size)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="metrics of a personalized model on holdout views")
    _common(p)
    _subject(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    _common(p, out_required=False)
    p.add_argument("--probes", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="prior vs. scratch and background-schedule variants")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default="pretrain,background",
                   help="comma-separated subset of: pretrain, background")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    dtype = dc.get_dtype()
    try:
        cfg = load_config(args.config, args.preset)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.dataset.seed = args.seed
        if args.deterministic is not None:
            cfg.deterministic = args.deterministic
        apply_precision(cfg.dtype)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        return args.func(args, cfg)
    except (DensityCollapse, FloatingPointError) as exc:
        log.error("event=numerical_failure kind=%s detail=%r", type(exc).__name__, str(exc))
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, OSError, KeyError, IndexError) as exc:
        log.error("event=invalid_input kind=%s detail=%r", type(exc).__name__, str(exc))
        return EXIT_INVALID
    finally:
        dc.set_dtype(dtype)


# ----------------------------------------------------------------- helpers

def _manifest(args, cfg: Config, **kw) -> RunManifest:
    m = RunManifest(cfg.seed, cfg.hash(), command=args.command, **kw)
    dump_config(cfg, os.path.join(args.out, "config.yaml"))
    m.outputs.setdefault("config", "config.yaml")
    m.save(args.out)
    return m


def synth_config_from_manifest(manifest: dict) -> SynthConfig:
    raw = dict(manifest["config"])
    for f in dataclasses.fields(SynthConfig):
        if isinstance(f.default, tuple) and f.name in raw:
            raw[f.name] = tuple(raw[f.name])
    return SynthConfig(**raw)


def _subject_views(args, fit_path=None) -> list:
    recs = load_views(args.data, [args.identity], [args.expression], args.views)
    if fit_path is None:
        return recs
    state = load_fit(fit_path)
    if state.n_images != len(recs):
        raise ValueError(f"fit has {state.n_images} images but {len(recs)} views were selected")
    return [View(r.image, r.alpha, state.cameras[i], state.beta, state.psi[i], r.identity)
            for i, r in enumerate(recs)]


def _train_views(data_root, cfg: Config) -> list:
    counts = load_manifest(data_root)["counts"]
    n = cfg.experiment.train_identities or counts["identities"]
    return load_views(data_root, list(range(min(n, counts["identities"]))))


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg: Config) -> int:
    m = generate_dataset(cfg.dataset, args.out, dry_run=args.dry_run)
    print(f"records={m['n_records']} identities={cfg.dataset.n_identities} "
          f"expressions={cfg.dataset.n_expressions} views={cfg.dataset.n_views}")
    if not args.dry_run:
        _manifest(args, cfg, outputs={"dataset": "manifest.json"})
    return EXIT_OK


def cmd_train_prior(args, cfg: Config) -> int:
    views = _train_views(args.data, cfg)
    res = train_prior(views, cfg.field, cfg.stage("prior"), cfg.render, cfg.losses,
                      background=not args.no_background)
    save_checkpoint(os.path.join(args.out, "prior.cafc"), res.params,
                    {"config_hash": cfg.hash(), "background": not args.no_background})
    print(f"steps={len(res.history)} final_loss={res.history[-1] if res.history else float('nan'):.6g} "
          f"foreground_accumulation={res.probe_accumulation:.4g}")
    _manifest(args, cfg, checkpoints={"prior": "prior.cafc"})
    return EXIT_OK


def cmd_fit_landmarks(args, cfg: Config) -> int:
    model = MorphableModel.load(os.path.join(args.data, "model.cafm"))
    recs = load_views(args.data, [args.identity], [args.expression], args.views)
    obs = [r.landmarks for r in recs]
    init = coarse_init(model, obs, recs[0].camera.K)
    fit_cfg = dataclasses.replace(cfg.fit, shared_expression=True)
    res = fit_landmarks(model, obs, init, fit_cfg)
    save_fit(os.path.join(args.out, "fit.txt"), res.state)
    err = reprojection_errors(model, res.state, obs)
    print(f"energy={res.energy:.6g} mean_reprojection_px={err.mean():.4g} max_reprojection_px={err.max():.4g}")
    _manifest(args, cfg, outputs={"fit": "fit.txt"})
    return EXIT_OK


def cmd_invert(args, cfg: Config) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    views = _subject_views(args, args.fit)
    small = [downscale(v, cfg.dataset.resolution) for v in views]
    w, hist = invert(params, small, cfg.stage("invert"), cfg.render, cfg.losses)
    write_blocks(os.path.join(args.out, "w.txt"), [[("w", w)]], header="faceprior latent v1")
    print(f"steps={len(hist)} final_loss={hist[-1] if hist else float('nan'):.6g}")
    _manifest(args, cfg, outputs={"w": "w.txt"})
    return EXIT_OK


def cmd_finetune(args, cfg: Config) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    views = _subject_views(args, args.fit)
    w = read_blocks(args.w)[0]["w"] if args.w else np.zeros(params.cfg.d_w)
    model = finetune(params, w, views, cfg.stage("finetune"), cfg.render, cfg.losses, args.mode)
    model.save(os.path.join(args.out, "model.cafp"))
    train_psnr = np.mean([psnr(render_novel_view(model, v.camera, rcfg=cfg.render)["rgb"],
                               v.image * v.alpha[..., None]) for v in views])
    print(f"steps={len(model.history)} train_psnr={train_psnr:.4f}")
    _manifest(args, cfg, checkpoints={"model": "model.cafp"})
    return EXIT_OK


def cmd_render(args, cfg: Config) -> int:
    model = PersonalizedModel.load(args.model)
    cam = camera_at(model.cameras[0].K, args.azimuth, args.elevation, args.radius)
    out = render_novel_view(model, cam, args.resolution, cfg.render)
    write_png(os.path.join(args.out, "rgb.png"), out["rgb"])
    write_normals_png(os.path.join(args.out, "normals.png"), out["normal"])
    write_pfm(os.path.join(args.out, "depth.pfm"), out["depth"])
    _manifest(args, cfg, outputs={"rgb": "rgb.png", "normals": "normals.png", "depth": "depth.pfm"})
    return EXIT_OK


def _check_disjoint(model: PersonalizedModel, holdout) -> None:
    train = np.array([c.center for c in model.cameras])
    for v in holdout:
        if np.min(np.linalg.norm(train - v.camera.center, axis=1)) < 1e-9:
            raise ValueError("holdout view coincides with a training camera")


def cmd_evaluate(args, cfg: Config) -> int:
    model = PersonalizedModel.load(args.model)
    holdout = load_views(args.data, [args.identity], [args.expression], args.views)
    _check_disjoint(model, holdout)
    rows = evaluate(model, holdout, cfg.render, os.path.join(args.out, "metrics.csv"),
                    names=[f"view{v}" for v in args.views])
    print(" ".join(f"{k}={rows[-1][k]:.4f}" for k in ("psnr", "ssim", "perceptual")))
    _manifest(args, cfg, metrics={"holdout": "metrics.csv"})
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .checks import GRADCHECK_TOL, gradient_suite
    results = gradient_suite(args.probes, cfg.seed)
    for name, err in results:
        print(f"check={name} max_rel_error={err:.3e} status={'pass' if err < GRADCHECK_TOL else 'fail'}")
    if args.out:
        with open(os.path.join(args.out, "gradcheck.csv"), "w") as f:
            f.write("check,max_rel_error\n")
            f.writelines(f"{n},{e!r}\n" for n, e in results)
    return EXIT_OK if all(e < GRADCHECK_TOL for _, e in results) else EXIT_NUMERICAL


ABLATION_FIELDS = ("variant", "seed", "status", "psnr", "ssim", "perceptual")


def cmd_ablate(args, cfg: Config) -> int:
    variants = [v for v in args.variants.split(",") if v]
    unknown = set(variants) - {"pretrain", "background"}
    if unknown:
        raise ValueError(f"unknown ablation variants: {sorted(unknown)}")
    rows = run_ablation(args.data, cfg, variants, args.out)
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w") as f:
        f.write(",".join(ABLATION_FIELDS) + "\n")
        for r in rows:
            f.write(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                             for k in ABLATION_FIELDS) + "\n")
    for r in rows:
        print(" ".join(f"{k}={r[k]}" for k in ABLATION_FIELDS))
    _manifest(args, cfg, checkpoints={"prior": "prior.cafc"}, metrics={"ablation": "ablation.csv"})
    return EXIT_OK


def subject_views(data_root, cfg: Config):
    """Input and holdout records of the few-shot subject described by ``cfg.experiment``."""
    manifest = load_manifest(data_root)
    scfg = synth_config_from_manifest(manifest)
    model = MorphableModel.load(os.path.join(data_root, "model.cafm"))
    K = scfg.intrinsics()
    ex = cfg.experiment

    def cams(pairs):
        return [camera_at(K, az, el, ex.radius) for az, el in pairs]
    recs = render_subject(model, scfg, ex.subject, cams(ex.inputs) + cams(ex.holdout))
    return recs[:len(ex.inputs)], recs[len(ex.inputs):]


def run_ablation(data_root, cfg: Config, variants, out_dir=None) -> list:
    """Rows of ``(variant, seed, status, psnr, ssim, perceptual)``.

    ``pretrain`` fine-tunes the subject from the prior and from scratch for
    each of ``cfg.experiment.scratch_seeds``; ``background`` trains a second
    prior without the background phase and fine-tunes from it.
    """
    views = _train_views(data_root, cfg)
    inputs, holdout = subject_views(data_root, cfg)
    inv, ft, rc, lw = cfg.stage("invert"), cfg.stage("finetune"), cfg.render, cfg.losses
    mode, res = cfg.experiment.mode, cfg.dataset.resolution

    def metrics_row(variant, seed, status, metrics=None):
        m = metrics[-1] if metrics else {"psnr": float("nan"), "ssim": float("nan"),
                                         "perceptual": float("nan")}
        return {"variant": variant, "seed": seed, "status": status, "psnr": float(m["psnr"]),
                "ssim": float(m["ssim"]), "perceptual": float(m["perceptual"])}

    rows = []
    prior = train_prior(views, cfg.field, cfg.stage("prior"), rc, lw, background=True).params
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "prior.cafc"), prior, {"background": True})
    _, m = few_shot(prior, inputs, holdout, inv, ft, rc, lw, res, mode)
    rows.append(metrics_row("prior", cfg.seed, "ok", m))
    if out_dir:
        write_metrics_csv(os.path.join(out_dir, "metrics_prior.csv"), m)
    if "pretrain" in variants:
        for s in cfg.experiment.scratch_seeds:
            p0, w0 = scratch_params(cfg.field, s)
            _, m = few_shot(p0, inputs, holdout, None, ft, rc, lw, None, mode, w0)
            rows.append(metrics_row("scratch", s, "ok", m))
    if "background" in variants:
        try:
            nb = train_prior(views, cfg.field, cfg.stage("prior"), rc, lw, background=False).params
        except DensityCollapse as exc:
            log.info("event=variant_collapsed variant=no_background step=%d", exc.step)
            rows.append(metrics_row("no_background", cfg.seed, "collapsed"))
        else:
            _, m = few_shot(nb, inputs, holdout, inv, ft, rc, lw, res, mode)
            rows.append(metrics_row("no_background", cfg.seed, "ok", m))
    return rows


if __name__ == "__main__":
    sys.exit(main())
