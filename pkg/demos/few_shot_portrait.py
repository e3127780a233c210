#!/usr/bin/env python3
"""Walk through the whole few-shot pipeline on synthetic heads.

Steps, each a CLI command writing its own run directory under ``--out``:

  generate       render the multi-identity training set
  train-prior    fit the conditional field to every identity
  fit-landmarks  recover cameras and morphable codes of one subject
  invert         find that subject's latent code in the prior
  finetune       adapt every weight to the three input views
  render         draw a novel view (color, normals, depth)
  evaluate       score the held-out views

With ``--quick`` every stage runs a handful of steps so the tour finishes in
under a minute; without it the full ``tiny`` preset runs, which takes several
minutes on one core.
"""
import argparse
import os
import sys

from faceprior.cli import main


def run(*args):
    print("$ faceprior", " ".join(args), flush=True)
    code = main(list(args))
    if code != 0:
        sys.exit(code)


def quick_config(path):
    with open(path, "w") as f:
        f.write("preset: tiny\n"
                "dataset: {n_identities: 3, n_expressions: 1, n_views: 6}\n"
                "field: {n_codes: 3}\n"
                "prior: {steps: 40, background_steps: 10, background_fade: 10,"
                " collapse_check_steps: 5, collapse_threshold: 0.0, log_every: 10}\n"
                "invert: {steps: 5}\nfinetune: {steps: 10}\nfit: {iterations: 200}\n")
    return path


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="demo-run")
    p.add_argument("--quick", action="store_true", help="a few steps per stage")
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    os.makedirs(args.out, exist_ok=True)
    base = (["--config", quick_config(os.path.join(args.out, "quick.yaml"))] if args.quick
            else ["--preset", "tiny"])
    d = lambda name: os.path.join(args.out, name)  # noqa: E731

    run("generate", *base, "--out", d("data"))
    run("train-prior", *base, "--data", d("data"), "--out", d("prior"))

    # identity 0 plays the subject: views 0-2 are the inputs, 3-5 are held out
    subject = ["--data", d("data"), "--identity", "0"]
    run("fit-landmarks", *base, *subject, "--views", "0,1,2", "--out", d("fit"))
    # later stages use the fitted cameras and codes instead of the generator's
    fitted = ["--fit", d("fit/fit.txt")]
    run("invert", *base, *subject, "--views", "0,1,2", *fitted, "--checkpoint",
        d("prior/prior.cafc"), "--out", d("invert"))
    run("finetune", *base, *subject, "--views", "0,1,2", *fitted, "--checkpoint",
        d("prior/prior.cafc"), "--w", d("invert/w.txt"), "--out", d("finetune"))
    run("render", *base, "--model", d("finetune/model.cafp"), "--azimuth", "25",
        "--elevation", "5", "--resolution", "64", "--out", d("render"))
    run("evaluate", *base, *subject, "--views", "3,4,5", "--model", d("finetune/model.cafp"),
        "--out", d("evaluate"))
    print(f"novel view: {d('render/rgb.png')}  metrics: {d('evaluate/metrics.csv')}")
