import math

import numpy as np
import pytest

from oracles import max_channel_diff, naive_render, numeric_jacobian, random_scene, relative_error
from splatparse import _accel
from splatparse.camera import CameraPose, project_gaussian, projection_jacobians
from splatparse.gaussians import Gaussian, GaussianScene
from splatparse.raster import feature_weights, render, render_feature_grad


def _single(pos=(0, 0, 0), scale=0.1, opacity=0.5, color=(1.0, 0.5, 0.25), bg=(0.0, 0.0, 0.0)):
    return GaussianScene([pos], [[scale] * 3], [[1, 0, 0, 0]], [opacity], [color], background_color=bg)


def test_isotropic_orthographic_covariance():
    # one pixel per scene unit
    cam = CameraPose(image_size=(40, 40), ortho_half_height=20.0, azimuth=0.7, elevation=0.3)
    s = 1.7
    g = Gaussian(np.zeros(3), np.full(3, s), np.array([0.6, 0.0, 0.8, 0.0]), 1.0, np.ones(3))
    pr = project_gaussian(g, cam)
    np.testing.assert_allclose(pr.cov, s**2 * np.eye(2), atol=1e-12)


@pytest.mark.parametrize("az,el", [(0.0, 0.0), (1.3, 0.4), (-2.0, -0.5), (0.4, math.pi / 2)])
def test_look_at_projects_to_center(az, el):
    cam = CameraPose(azimuth=az, elevation=el, look_at=(0.3, -0.2, 0.5), image_size=(31, 17))
    g = Gaussian(np.array([0.3, -0.2, 0.5]), np.full(3, 0.1), np.array([1.0, 0, 0, 0]), 1.0, np.ones(3))
    pr = project_gaussian(g, cam)
    np.testing.assert_allclose(pr.mean, [15.5, 8.5], atol=1e-12)
    assert pr.depth == pytest.approx(cam.radius)


def test_perspective_covariance_matches_numeric_jacobian():
    rng = np.random.default_rng(3)
    cam = CameraPose("perspective", radius=3.0, azimuth=0.5, elevation=0.35, image_size=(80, 60))
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        g = Gaussian(rng.uniform(-0.8, 0.8, 3), rng.uniform(0.05, 0.3, 3), q, 1.0, np.ones(3))
        pr = project_gaussian(g, cam)
        jac = numeric_jacobian(lambda p: cam.project_points(p[None])[0], g.position)
        cov3 = GaussianScene([g.position], [g.scale], [q], [1.0], [[1, 1, 1]]).covariances()[0]
        expected = jac @ cov3 @ jac.T
        assert relative_error(pr.cov, expected) <= 1e-4


def test_perspective_behind_camera_is_culled():
    cam = CameraPose("perspective", radius=2.0)
    g = Gaussian(cam.eye() + cam.direction(), np.full(3, 0.1), np.array([1.0, 0, 0, 0]), 1.0, np.ones(3))
    assert project_gaussian(g, cam).culled
    scene = GaussianScene([g.position], [g.scale], [g.rotation], [1.0], [[1, 1, 1]])
    out = render(scene, cam)
    assert out.alpha.max() == 0.0


def test_single_gaussian_center_pixel():
    a, c, bg = 0.6, np.array([0.9, 0.4, 0.2]), np.array([0.1, 0.2, 0.3])
    cam = CameraPose(image_size=(33, 33))
    out = render(_single(opacity=a, color=c, bg=bg), cam)
    np.testing.assert_allclose(out.color[16, 16], a * c + (1 - a) * bg, atol=1e-12)
    assert out.alpha[16, 16] == pytest.approx(a)
    assert out.instance_map[16, 16] == -1
    assert out.depth[16, 16] == pytest.approx(cam.radius)


def test_empty_channel_request_produces_nothing():
    out = render(_single(), CameraPose(), channels=())
    assert all(getattr(out, k) is None for k in ("color", "alpha", "depth", "feature", "instance_map"))


def test_background_only_render():
    cam = CameraPose(image_size=(20, 10))
    out = render(GaussianScene.empty((0.2, 0.3, 0.4)), cam)
    assert np.all(out.alpha == 0)
    assert np.all(np.isinf(out.depth))
    assert np.all(out.instance_map == -1)
    np.testing.assert_allclose(out.color, np.broadcast_to([0.2, 0.3, 0.4], (10, 20, 3)))


def test_nan_gaussian_rejected():
    with pytest.raises(ValueError):
        GaussianScene([[0, np.nan, 0]], [[0.1] * 3], [[1, 0, 0, 0]], [0.5], [[1, 1, 1]])


def test_zero_size_image_rejected():
    with pytest.raises(ValueError):
        CameraPose(image_size=(0, 10))


@pytest.mark.parametrize("projection", ["orthographic", "perspective"])
@pytest.mark.parametrize("seed", range(4))
def test_tiled_matches_naive_oracle(projection, seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 50)
    cam = CameraPose(projection, radius=3.5, azimuth=rng.uniform(-3, 3), elevation=rng.uniform(-1, 1.5),
                     image_size=(45, 38), ortho_half_height=1.6)
    assert max_channel_diff(render(scene, cam), naive_render(scene, cam)) <= 1e-6


def test_backends_agree():
    rng = np.random.default_rng(11)
    scene = random_scene(rng, 120)
    cam = CameraPose(azimuth=0.2, elevation=0.5, image_size=(50, 35), ortho_half_height=1.5)
    a = render(scene, cam, backend="numba")
    b = render(scene, cam, backend="numpy")
    for key in ("color", "alpha", "feature"):
        np.testing.assert_allclose(getattr(a, key), getattr(b, key), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(a.depth, b.depth)
    np.testing.assert_array_equal(a.instance_map, b.instance_map)
    wa = feature_weights(scene, cam, backend="numba")
    wb = feature_weights(scene, cam, backend="numpy")
    assert abs(wa - wb).max() <= 1e-12


def test_thread_count_does_not_change_output():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, 80)
    cam = CameraPose(image_size=(48, 48), ortho_half_height=1.5)
    _accel.set_num_threads(1)
    a = render(scene, cam)
    _accel.set_num_threads(64)
    b = render(scene, cam)
    for key in ("color", "alpha", "depth", "feature", "instance_map"):
        np.testing.assert_array_equal(getattr(a, key), getattr(b, key))


def test_permutation_invariance_bit_equal():
    rng = np.random.default_rng(7)
    scene = random_scene(rng, 60)
    cam = CameraPose(azimuth=0.9, elevation=0.2, image_size=(40, 40), ortho_half_height=1.5)
    perm = rng.permutation(len(scene))
    a = render(scene, cam)
    b = render(scene.subset(perm), cam)
    for key in ("color", "alpha", "depth", "feature", "instance_map"):
        np.testing.assert_array_equal(getattr(a, key), getattr(b, key))


def test_feature_linearity():
    rng = np.random.default_rng(8)
    scene = random_scene(rng, 60)
    cam = CameraPose(image_size=(32, 32), ortho_half_height=1.5)
    fa, fb = rng.normal(size=(2, len(scene), 16))
    ra = render(scene.replace(features=fa), cam, "feature").feature
    rb = render(scene.replace(features=fb), cam, "feature").feature
    rab = render(scene.replace(features=fa + fb), cam, "feature").feature
    assert np.max(np.abs(rab - ra - rb)) <= 1e-6


def test_alpha_range_and_weight_consistency():
    rng = np.random.default_rng(9)
    scene = random_scene(rng, 150)
    cam = CameraPose(image_size=(40, 30), ortho_half_height=1.3)
    out = render(scene, cam)
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1
    w = feature_weights(scene, cam)
    # sum of weights along a pixel's list = 1 - final transmittance
    np.testing.assert_allclose(np.asarray(w.sum(axis=1)).ravel(), out.alpha.ravel(), atol=1e-12)
    # transmittance before each contribution never increases along the sorted list
    for row in range(0, w.shape[0], 37):
        lo, hi = w.indptr[row], w.indptr[row + 1]
        trans = 1.0 - np.concatenate([[0.0], np.cumsum(w.data[lo:hi])])
        assert np.all(np.diff(trans) <= 1e-15)
    assert np.all(out.depth[out.alpha == 0] == np.inf)
    assert np.all(out.instance_map[out.alpha == 0] == -1)


def test_orthographic_radius_shift():
    rng = np.random.default_rng(10)
    scene = random_scene(rng, 70)
    cam = CameraPose(radius=3.0, azimuth=0.4, elevation=0.6, image_size=(36, 36), ortho_half_height=1.5)
    far = cam.with_(radius=6.0)
    a, b = render(scene, cam), render(scene, far)
    for key in ("color", "alpha", "feature", "instance_map"):
        np.testing.assert_allclose(getattr(a, key), getattr(b, key), rtol=0, atol=1e-9)
    fin = np.isfinite(a.depth)
    np.testing.assert_array_equal(fin, np.isfinite(b.depth))
    np.testing.assert_allclose(b.depth[fin] - a.depth[fin], 3.0, atol=1e-9)


def test_feature_grad_single_pixel_basis():
    rng = np.random.default_rng(12)
    scene = random_scene(rng, 40, spread=0.4)
    cam = CameraPose(image_size=(24, 24), ortho_half_height=1.0)
    ref = naive_render(scene, cam)
    p, k = 12 * 24 + 11, 5
    grads = np.zeros((24, 24, 16))
    grads[12, 11, k] = 1.0
    g = render_feature_grad(scene, cam, grads)
    expected = np.zeros((len(scene), 16))
    expected[ref["order"], k] = ref["weights"][p]
    np.testing.assert_allclose(g, expected, atol=1e-12)
    assert np.all(render_feature_grad(scene, cam, np.zeros((24, 24, 16))) == 0)


def test_feature_grad_matches_finite_differences():
    rng = np.random.default_rng(13)
    scene = random_scene(rng, 30, spread=0.5)
    cam = CameraPose("perspective", radius=3.0, image_size=(20, 16))
    upstream = rng.normal(size=(16, 20, 16))

    def loss(feats):
        return float(np.sum(render(scene.replace(features=feats), cam, "feature").feature * upstream))

    analytic = render_feature_grad(scene, cam, upstream)
    numeric = numeric_jacobian(loss, scene.features.copy(), eps=1e-5)
    assert relative_error(analytic, numeric) <= 1e-4


def test_feature_grad_shape_mismatch():
    with pytest.raises(ValueError):
        render_feature_grad(_single(), CameraPose(image_size=(8, 8)), np.zeros((8, 9, 16)))
