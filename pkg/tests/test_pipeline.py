import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceprior import diffcore as dc
from faceprior.field import FieldConfig
from faceprior.losses import LossWeights
from faceprior.pipeline import (DensityCollapse, Divergence, PersonalizedModel, RaySet, TrainConfig,
                                View, background_level, downscale, evaluate, few_shot, finetune,
                                interpolate_expression, invert, load_views, read_metrics_csv,
                                render_novel_view, scratch_params, train_prior, write_metrics_csv)
from faceprior.render import RenderConfig
from faceprior.synthgen import SynthConfig, camera_at, generate_dataset

FC = FieldConfig(d_w=4, n_codes=2, pos_levels=3, dir_levels=1, prop_width=8, prop_depth=1,
                 nerf_width=16, nerf_depth=2, bottleneck=8, view_width=8)
RC = RenderConfig(n_proposal=8, n_nerf=8)
QUIET = dict(log_every=0, clip_norm=None)


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(SynthConfig(n_identities=2, n_expressions=1, n_views=4, resolution=12), root)
    return root


@pytest.fixture(scope="module")
def views(data_root):
    return load_views(data_root)


@pytest.fixture(scope="module")
def prior(views):
    cfg = TrainConfig(steps=6, batch_rays=64, background_steps=2, background_fade=2,
                      collapse_check_steps=1, collapse_threshold=0.0, **QUIET)
    return train_prior(views, FC, cfg, RC)


def _digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ------------------------------------------------------- expression blending

def test_single_camera_returns_its_code():
    psi = np.array([[0.3, -1.2, 4.0]])
    out, w = interpolate_expression(psi, [[0.0, 0.0, 3.0]], [5.0, -2.0, 1.0])
    np.testing.assert_array_equal(out, psi[0])
    np.testing.assert_array_equal(w, [1.0])


def test_equidistant_cameras_blend_evenly():
    psis = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    ang = np.deg2rad([0.0, 120.0, 240.0])
    pos = np.stack([np.cos(ang), np.sin(ang), np.zeros(3)], axis=1) * 3.0
    out, w = interpolate_expression(psis, pos, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(w, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(out, psis.mean(axis=0), atol=1e-15)


def test_target_on_a_camera_selects_it():
    psis = np.array([[1.0], [2.0], [7.0]])
    pos = np.array([[0.0, 0.0, 3.0], [2.0, 0.0, 2.0], [-2.0, 0.0, 2.0]])
    out, w = interpolate_expression(psis, pos, pos[1])
    assert w[1] > 1 - 1e-6
    assert abs(out[0] - 2.0) < 1e-5


def test_interpolation_rejects_bad_input():
    with pytest.raises(ValueError):
        interpolate_expression(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        interpolate_expression(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(3), eps=0.0)


coords = st.floats(-4, 4, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.tuples(coords, coords, coords))
def test_weights_form_a_partition_of_unity(n, seed, target):
    rng = np.random.default_rng(seed)
    psis, pos = rng.normal(size=(n, 5)), rng.normal(size=(n, 3)) * 3
    out, w = interpolate_expression(psis, pos, target)
    assert abs(w.sum() - 1.0) < 1e-12 and np.all(w >= 0)
    # the blend stays in the convex hull of the codes
    assert np.all(out <= psis.max(axis=0) + 1e-12) and np.all(out >= psis.min(axis=0) - 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_blend_is_continuous_in_the_target(seed):
    rng = np.random.default_rng(seed)
    psis, pos = rng.normal(size=(3, 4)), rng.normal(size=(3, 3)) * 3
    t = rng.normal(size=3)
    a, _ = interpolate_expression(psis, pos, t)
    b, _ = interpolate_expression(psis, pos, t + 1e-9)
    assert np.max(np.abs(a - b)) < 1e-5


# ------------------------------------------------------------------ schedule

def test_background_schedule():
    assert [background_level(s, 2, 0) for s in range(4)] == [1.0, 1.0, 0.0, 0.0]
    levels = [background_level(s, 2, 3) for s in range(7)]
    assert levels[:2] == [1.0, 1.0] and levels[5:] == [0.0, 0.0]
    assert levels[2] > levels[3] > levels[4] > 0
    assert background_level(0, 0, 0) == 0.0


def test_ray_targets_mask_the_background(views):
    rs = RaySet.from_views(views[:1])
    np.testing.assert_array_equal(rs.target(1.0), rs.rgb)
    np.testing.assert_allclose(rs.target(0.0), rs.rgb * rs.alpha[:, None])
    half = rs.target(0.5)
    bg = rs.alpha == 0
    np.testing.assert_allclose(half[bg], 0.5 * rs.rgb[bg])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-3, lr_end=1e-2)
    with pytest.raises(ValueError):
        TrainConfig(background_fade=-1)


def test_downscale_rescales_camera(views):
    small = downscale(views[0], 6)
    assert small.image.shape == (6, 6, 3) and small.alpha.shape == (6, 6)
    assert small.camera.K.width == 6
    np.testing.assert_allclose(small.image.mean(axis=(0, 1)), views[0].image.mean(axis=(0, 1)),
                               atol=1e-6)


# --------------------------------------------------------------------- prior

def test_prior_trains_one_code_per_identity(prior):
    assert len(prior.history) == 6
    np.testing.assert_array_equal(prior.params.code_ids, [0, 1])
    assert prior.params["codebook"].shape == (2, FC.d_w)
    assert 0.0 <= prior.probe_accumulation <= 1.0


def test_prior_is_reproducible(views, prior):
    cfg = TrainConfig(steps=6, batch_rays=64, background_steps=2, background_fade=2,
                      collapse_check_steps=1, collapse_threshold=0.0, **QUIET)
    again = train_prior(views, FC, cfg, RC)
    assert again.history == prior.history
    for k in prior.params.names():
        np.testing.assert_array_equal(again.params[k].data, prior.params[k].data)


def test_collapse_probe_aborts(views):
    # accumulation never exceeds one, so this threshold always trips
    cfg = TrainConfig(steps=4, batch_rays=32, background_steps=1, collapse_check_steps=1,
                      collapse_threshold=1.5, **QUIET)
    with pytest.raises(DensityCollapse) as info:
        train_prior(views, FC, cfg, RC)
    assert info.value.step == 2


# ----------------------------------------------------------------- inversion

def test_inversion_perceptual_term_adds_on_top_of_l1(views, prior):
    cfg = TrainConfig(steps=1, patch_size=6, patches=2, lr_start=1e-9, lr_end=1e-9, **QUIET)
    _, plain = invert(prior.params, views[:2], cfg, RC, LossWeights(perceptual=0.0))
    _, both = invert(prior.params, views[:2], cfg, RC, LossWeights(perceptual=1.0))
    assert both[0] > plain[0] > 0


def test_inversion_only_moves_the_latent(views, prior):
    before = _digest(*prior.params.arrays().values())
    cfg = TrainConfig(steps=3, patch_size=6, patches=2, **QUIET)
    w, hist = invert(prior.params, views[:2], cfg, RC)
    assert w.shape == (FC.d_w,) and len(hist) == 3
    assert _digest(*prior.params.arrays().values()) == before


# --------------------------------------------------------------- fine-tuning

def _subject(views):
    return [v for v in views if v.identity == 1][:3]


def test_zero_step_finetune_is_identity(views, prior):
    w = np.arange(FC.d_w, dtype=float)
    m = finetune(prior.params, w, _subject(views), TrainConfig(steps=0, **QUIET), RC)
    for k in prior.params.names():
        np.testing.assert_array_equal(m.params[k].data, prior.params[k].data)
    np.testing.assert_array_equal(m.w, w)
    assert m.history == []


def test_finetune_freezes_inputs_and_cameras(views, prior):
    subj = _subject(views)
    before = _digest(*[np.r_[v.beta, v.psi] for v in subj], *[v.camera.R for v in subj],
                     *[v.camera.t for v in subj], *prior.params.arrays().values())
    m = finetune(prior.params, np.zeros(FC.d_w), subj, TrainConfig(steps=3, batch_rays=32, **QUIET),
                 RC)
    after = _digest(*[np.r_[v.beta, v.psi] for v in subj], *[v.camera.R for v in subj],
                    *[v.camera.t for v in subj], *prior.params.arrays().values())
    assert before == after
    for cam, v in zip(m.cameras, subj):
        np.testing.assert_array_equal(cam.R, v.camera.R)
    assert not np.array_equal(m.params["nerf.l0.w"].data, prior.params["nerf.l0.w"].data)
    np.testing.assert_array_equal(m.params["codebook"].data, prior.params["codebook"].data)


def test_itw_keeps_per_image_expressions(views, prior):
    subj = _subject(views)
    subj = [dataclasses.replace(View(v.image, v.alpha, v.camera, v.beta, v.psi, 1),
                                psi=v.psi + k) for k, v in enumerate(subj)]
    itw = finetune(prior.params, np.zeros(FC.d_w), subj, TrainConfig(steps=0, **QUIET), RC, mode="itw")
    assert len({tuple(p) for p in itw.psis}) == 3
    studio = finetune(prior.params, np.zeros(FC.d_w), subj, TrainConfig(steps=0, **QUIET), RC,
                      mode="studio")
    np.testing.assert_allclose(studio.psis, np.mean([v.psi for v in subj], axis=0)[None].repeat(3, 0))
    novel = camera_at(subj[0].camera.K, 10.0, 0.0, 3.0)
    psi, w = itw.expression_for(novel)
    assert abs(w.sum() - 1) < 1e-12 and not np.allclose(psi, itw.psis[0])
    np.testing.assert_array_equal(studio.expression_for(novel)[0], studio.psis[0])


def test_non_finite_loss_raises_divergence_with_last_model(views, prior):
    subj = _subject(views)
    bad = [View(np.full_like(v.image, np.nan), v.alpha, v.camera, v.beta, v.psi, 1) for v in subj]
    with pytest.raises(Divergence) as info:
        finetune(prior.params, np.zeros(FC.d_w), bad, TrainConfig(steps=2, batch_rays=16, **QUIET), RC)
    assert info.value.step == 0
    last = info.value.last_good
    for k in prior.params.names():
        np.testing.assert_array_equal(last.params[k].data, prior.params[k].data)


# -------------------------------------------------- personalized model and io

@pytest.fixture(scope="module")
def model(views, prior):
    return finetune(prior.params, np.full(FC.d_w, 0.1), _subject(views),
                    TrainConfig(steps=2, batch_rays=32, **QUIET), RC)


def test_model_round_trip_is_bit_exact(model, tmp_path):
    path = tmp_path / "m.cafp"
    model.save(path)
    back = PersonalizedModel.load(path)
    assert back.to_bytes() == model.to_bytes()
    np.testing.assert_array_equal(back.w, model.w)
    np.testing.assert_array_equal(back.psis, model.psis)
    assert back.mode == model.mode
    for a, b in zip(back.cameras, model.cameras):
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)


def test_model_rejects_mismatched_codes(model):
    with pytest.raises(ValueError):
        PersonalizedModel(model.params, model.w, model.beta, model.psis[:1], model.cameras)
    with pytest.raises(ValueError):
        PersonalizedModel(model.params, model.w, model.beta, model.psis, model.cameras, mode="x")


def test_novel_view_render_is_deterministic(model):
    cam = camera_at(model.cameras[0].K, 25.0, -5.0, 3.0)
    a, b = render_novel_view(model, cam, rcfg=RC), render_novel_view(model, cam, rcfg=RC)
    for k in ("rgb", "acc", "depth", "normal"):
        np.testing.assert_array_equal(a[k], b[k])
    assert a["rgb"].shape == (12, 12, 3)
    assert render_novel_view(model, cam, resolution=5, rcfg=RC)["rgb"].shape == (5, 5, 3)


def test_evaluate_rows_and_csv(model, views, tmp_path):
    holdout = [v for v in views if v.identity == 1][3:]
    rows = evaluate(model, holdout, RC, tmp_path / "m.csv")
    assert [r["view"] for r in rows] == ["view0", "mean"]
    assert rows[-1]["psnr"] == rows[0]["psnr"]
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back == rows
    with pytest.raises(ValueError):
        evaluate(model, [], RC)


def test_metrics_csv_preserves_floats_exactly(tmp_path):
    rows = [{"view": "a", "psnr": 0.1 + 0.2, "ssim": 1 / 3, "perceptual": 2.0 ** -40}]
    write_metrics_csv(tmp_path / "x.csv", rows)
    assert read_metrics_csv(tmp_path / "x.csv") == rows


def test_few_shot_from_scratch(views):
    p0, w0 = scratch_params(FC, 3)
    assert p0["codebook"].shape == (1, FC.d_w) and not w0.any()
    subj = [v for v in views if v.identity == 1]
    m, rows = few_shot(p0, subj[:2], subj[2:], None, TrainConfig(steps=2, batch_rays=16, **QUIET),
                       RC, LossWeights(), w_init=w0)
    assert len(rows) == 3 and all(np.isfinite(r["psnr"]) for r in rows)


def test_float32_training_stays_float32(views):
    prev = dc.get_dtype()
    dc.set_dtype(np.float32)
    try:
        cfg = TrainConfig(steps=2, batch_rays=16, background_steps=1, collapse_threshold=0.0, **QUIET)
        res = train_prior(views, FC, cfg, RC)
        assert res.params["nerf.l0.w"].data.dtype == np.float32
    finally:
        dc.set_dtype(prev)
