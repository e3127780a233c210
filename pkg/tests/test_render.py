import numpy as np
import pytest
from scipy import stats

from faceprior import diffcore as dc
from faceprior.camera import Camera, Intrinsics
from faceprior.field import FieldConfig, FieldParams
from faceprior.render import (AnalyticField, NetworkField, RenderConfig, Rays, composite,
                              compositing_weights, gen_rays, midpoints, read_pfm, render_image,
                              render_pixel, render_rays, resample, stratified_samples,
                              write_normals_png, write_pfm, write_png)
from faceprior.synthgen import camera_at

K = Intrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)


# ----------------------------------------------------------------------- rays

def test_principal_ray_on_axis():
    cam = camera_at(K, 30.0, 10.0, 3.0)
    # pixel (15.5, 15.5) is not the principal point; use an odd-size frame
    K33 = Intrinsics(40.0, 40.0, 16.5, 16.5, 33, 33)
    cam = Camera(K33, cam.R, cam.t)
    r = gen_rays(cam, np.array([[16, 16]]))
    np.testing.assert_allclose(r.dirs[0], cam.forward, atol=1e-12)
    np.testing.assert_allclose(r.origins[0], cam.center)
    assert np.isclose(r.near[0], 3.0 - 1.3) and np.isclose(r.far[0], 3.0 + 1.3)


def test_ray_directions_unit_and_corner():
    cam = camera_at(K, -60.0, 20.0, 2.9)
    r = gen_rays(cam)
    assert len(r) == 32 * 32
    np.testing.assert_allclose(np.linalg.norm(r.dirs, axis=1), 1.0)
    d = np.linalg.inv(K.matrix) @ np.array([0.5, 0.5, 1.0])
    d = cam.R.T @ d
    np.testing.assert_allclose(r.dirs[0], d / np.linalg.norm(d), atol=1e-12)


def test_camera_inside_bound_rejected():
    cam = camera_at(K, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        gen_rays(cam)


# -------------------------------------------------------------------- sampling

def test_stratified_without_jitter_is_uniform():
    t = stratified_samples(np.array([1.0]), np.array([3.0]), 4)
    np.testing.assert_allclose(midpoints(t), [[1.25, 1.75, 2.25, 2.75]])


def test_stratified_increasing():
    rng = np.random.default_rng(0)
    t = stratified_samples(np.full(10_000, 0.5), np.full(10_000, 4.0), 8, rng)
    assert np.all(np.diff(t, axis=1) > 0)
    assert np.all(t[:, 0] == 0.5) and np.all(t[:, -1] == 4.0)


def test_stratified_mean_is_stratum_midpoint():
    rng = np.random.default_rng(1)
    n = 100_000
    t = stratified_samples(np.zeros(n), np.ones(n), 4, rng)
    m = midpoints(t)
    expected = (np.arange(4) + 0.5) / 4
    # boundary jitter is uniform over a stratum; a midpoint averages two of them
    sd = np.array([1, np.sqrt(2), np.sqrt(2), 1]) * (1 / 4) / np.sqrt(12) / 2
    assert np.all(np.abs(m.mean(axis=0) - expected) < 3 * sd / np.sqrt(n))


def test_resample_single_bin():
    t = np.linspace(0, 1, 9)[None]
    w = np.zeros((1, 8))
    w[0, 5] = 0.3
    out, flag = resample(t, w, 16, np.random.default_rng(2))
    inner = out[0, 1:-1]
    assert np.all((inner >= t[0, 5]) & (inner <= t[0, 6])) and not flag[0]
    assert out[0, 0] == 0.0 and out[0, -1] == 1.0


def test_resample_zero_weights_flagged():
    t = np.linspace(0, 1, 5)[None]
    out, flag = resample(t, np.zeros((1, 4)), 4)
    assert flag[0]
    np.testing.assert_allclose(out, [[0, 1 / 6, 0.5, 5 / 6, 1.0]])


def test_resample_uniform_chi_square():
    rng = np.random.default_rng(3)
    t = np.tile(np.linspace(0, 1, 11), (2000, 1))
    out, _ = resample(t, np.ones((2000, 10)), 8, rng)
    counts = np.histogram(out[:, 1:-1].ravel(), bins=10, range=(0, 1))[0]
    assert stats.chisquare(counts).pvalue > 0.01


def test_resample_two_bins():
    rng = np.random.default_rng(4)
    n_rays = 4000
    t = np.tile([0.0, 1.0, 2.0], (n_rays, 1))
    out, _ = resample(t, np.tile([1.0, 3.0], (n_rays, 1)), 8, rng)
    x = out[:, 1:-1].ravel()
    frac = np.mean(x < 1.0)
    sd = np.sqrt(0.25 * 0.75 / x.size)
    assert abs(frac - 0.25) < 3 * sd


def test_resample_deterministic():
    t = np.tile(np.linspace(0, 1, 9), (3, 1))
    w = np.random.default_rng(5).random((3, 8))
    a = resample(t, w, 6, np.random.default_rng(9))[0]
    b = resample(t, w, 6, np.random.default_rng(9))[0]
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a, axis=1) > 0)


# ------------------------------------------------------------------ composite

def test_empty_field():
    t = np.tile(np.linspace(2, 4, 9), (2, 1))
    c = composite(np.zeros((2, 8)), np.full((2, 8, 3), 0.7), t)
    np.testing.assert_array_equal(c.rgb.data, 0.0)
    np.testing.assert_array_equal(c.acc.data, 0.0)


def test_opaque_first_sample():
    t = np.linspace(2, 4, 9)[None]
    sigma = np.zeros((1, 8))
    sigma[0, 0] = 1e4
    col = np.random.default_rng(6).random((1, 8, 3))
    c = composite(sigma, col, t)
    np.testing.assert_allclose(c.rgb.data[0], col[0, 0], atol=1e-12)
    assert abs(c.acc.data[0] - 1.0) < 1e-12


def test_constant_medium_closed_form():
    t = np.linspace(2.0, 4.5, 129)[None]
    sigma, col = 0.8, np.array([0.2, 0.5, 0.9])
    c = composite(np.full((1, 128), sigma), np.tile(col, (1, 128, 1)), t)
    np.testing.assert_allclose(c.rgb.data[0], col * (1 - np.exp(-sigma * 2.5)), atol=1e-3)


def test_weights_identity_and_monotone_transmittance():
    rng = np.random.default_rng(7)
    sigma = rng.exponential(2.0, (50, 40))
    t = np.sort(rng.uniform(1, 5, (50, 41)), axis=1)
    w, T, Tf = compositing_weights(sigma, t)
    np.testing.assert_allclose(w.data.sum(axis=1), 1 - Tf.data, atol=1e-12)
    assert np.all(np.diff(T.data, axis=1) <= 0)
    assert np.all(w.data >= 0)


def test_split_interval_invariance():
    rng = np.random.default_rng(8)
    t = np.sort(rng.uniform(1, 5, 11))[None]
    sigma, col = rng.exponential(1.0, (1, 10)), rng.random((1, 10, 3))
    k = 4
    mid = 0.5 * (t[0, k] + t[0, k + 1])
    t2 = np.insert(t, k + 1, mid, axis=1)
    s2 = np.insert(sigma, k, sigma[0, k], axis=1)
    c2 = np.insert(col, k, col[0, k], axis=1)
    np.testing.assert_allclose(composite(sigma, col, t).rgb.data, composite(s2, c2, t2).rgb.data,
                               atol=1e-9)


def test_composite_bounds_and_depth():
    rng = np.random.default_rng(9)
    sigma = rng.exponential(1.0, (20, 16))
    t = np.sort(rng.uniform(1, 5, (20, 17)), axis=1)
    col = rng.random((20, 16, 3))
    n = rng.normal(size=(20, 16, 3))
    c = composite(sigma, col, t, n)
    assert np.all(c.acc.data <= 1 + 1e-6)
    assert np.all(c.rgb.data <= c.acc.data[:, None] + 1e-6)
    assert np.all((c.depth.data >= t[:, 0]) & (c.depth.data <= t[:, -1]))
    np.testing.assert_allclose(np.linalg.norm(c.normal.data, axis=1), 1.0)


def test_composite_rejects_nonfinite():
    with pytest.raises(dc.NonFiniteError):
        composite(np.array([[np.nan, 1.0]]), np.zeros((1, 2, 3)), np.array([[0.0, 1.0, 2.0]]))


# ---------------------------------------------------------------- full render

def sphere_field(radius=0.6, k=20.0):
    def sigma(x):
        r = dc.sqrt(dc.sum(dc.square(x), axis=-1))
        return 30.0 * dc.sigmoid(k * (radius - r))

    def color(x, d):
        return dc.sigmoid(2.0 * x)
    return AnalyticField(sigma, color)


def test_render_counts_and_determinism():
    cam = camera_at(K, 0.0, 0.0, 3.0)
    rays = gen_rays(cam, np.array([[16, 16], [3, 4]]))
    cfg = RenderConfig(n_proposal=12, n_nerf=20)
    a = render_rays(sphere_field(), rays, np.zeros((2, 1)), cfg, np.random.default_rng(0))
    b = render_rays(sphere_field(), rays, np.zeros((2, 1)), cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(a.rgb.data, b.rgb.data)
    assert a.t.shape == (2, 21) and a.weights.shape == (2, 20)
    assert [p[0].shape for p in a.proposals] == [(2, 13), (2, 13)]
    np.testing.assert_allclose(a.s[:, 0], 0.0) and np.testing.assert_allclose(a.s[:, -1], 1.0)


def test_sphere_silhouette_and_depth():
    cam = camera_at(K, 0.0, 0.0, 3.0)
    rays = gen_rays(cam, np.array([[16, 16], [0, 0]]))
    out = render_rays(sphere_field(), rays, np.zeros((2, 1)), RenderConfig(), None)
    assert out.acc.data[0] > 0.99 and out.acc.data[1] < 1e-3
    assert abs(out.depth.data[0] - (3.0 - 0.6)) < 0.05


def test_render_pixel_and_image_with_network(tmp_path):
    cfg_f = FieldConfig(d_beta=2, d_psi=2, d_w=2, n_codes=1, pos_levels=3, dir_levels=1,
                        prop_width=8, prop_depth=1, nerf_width=8, nerf_depth=2, bottleneck=4,
                        view_width=4)
    fld = NetworkField(FieldParams.init(cfg_f))
    cam = camera_at(Intrinsics.from_fov(45, 8, 8), 10.0, 5.0, 3.0)
    rcfg = RenderConfig(n_proposal=8, n_nerf=8)
    img = render_image(fld, cam, np.zeros(6), rcfg, chunk=20)
    img2 = render_image(fld, cam, np.zeros(6), rcfg, chunk=64)
    np.testing.assert_array_equal(img["rgb"], img2["rgb"])
    ray = gen_rays(cam, np.array([[2, 5]]))
    px = render_pixel(fld, ray, np.zeros(6), rcfg)
    np.testing.assert_allclose(px.rgb.data[0], img["rgb"][2, 5], atol=1e-12)
    write_png(tmp_path / "c.png", img["rgb"])
    write_normals_png(tmp_path / "n.png", img["normal"])
    write_pfm(tmp_path / "d.pfm", img["depth"])
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), img["depth"].astype(np.float32))


def test_rays_cat_subset():
    cam = camera_at(K, 0.0, 0.0, 3.0)
    r = gen_rays(cam)
    back = Rays.cat([r.subset(slice(0, 10)), r.subset(slice(10, None))])
    np.testing.assert_array_equal(back.dirs, r.dirs)
