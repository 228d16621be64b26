import math

import numpy as np
import pytest

from inv.config import TrainHyper, toy_3d_config
from inv.errors import InvalidArgument
from inv.model import split_model
from inv.nn import DenseLayer, init_network
from inv.render3d import (
    FAR,
    NEAR,
    Camera,
    SphereScene,
    generate_rays,
    read_scene_manifest,
    render_view,
    scene_cameras,
    stratified_samples,
    synth_scene_sequence,
    train_frame_3d,
    volume_render,
    volume_render_backward,
    write_scene_sequence,
)
from inv.render3d import _composite


def _cam(size=33, focal=40.0):
    return Camera.look_at((2.0, 1.0, 0.5), (0, 0, 0), focal, size, size)


# --- cameras and rays ---------------------------------------------------------


def test_camera_rejects_non_rotation():
    with pytest.raises(InvalidArgument):
        Camera(np.zeros(3), np.diag([1.0, 1.0, 2.0]), 10.0, 4, 4)


def test_center_ray_is_forward_axis():
    cam = _cam()
    rays = generate_rays(cam)
    center = rays.directions[(cam.height // 2) * cam.width + cam.width // 2]
    assert np.allclose(center, cam.forward, atol=1e-6)


def test_directions_unit_length():
    rays = generate_rays(_cam(17))
    assert np.allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-6)
    assert np.all(rays.origins == _cam(17).position)


def test_corner_ray_angle():
    cam = _cam(size=33, focal=25.0)
    corner = generate_rays(cam).directions[0]
    half_extent = math.hypot((cam.width - 1) / 2, (cam.height - 1) / 2)  # pixel-center offsets
    angle = math.acos(float(np.clip(corner @ cam.forward, -1, 1)))
    assert angle == pytest.approx(math.atan(half_extent / cam.focal), abs=1e-5)


def test_top_left_pixel_points_up_and_left():
    cam = _cam()
    d = generate_rays(cam).directions[0]
    right, up = cam.rotation[:, 0], cam.rotation[:, 1]
    assert d @ right < 0 and d @ up > 0


# --- sampling -----------------------------------------------------------------


def test_single_sample_within_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        (d,) = stratified_samples(NEAR, FAR, 1, rng)
        assert NEAR <= d <= FAR


def test_samples_sorted_and_inside_bins():
    d = stratified_samples(0.5, 4.0, 32, np.random.default_rng(1), count=200)
    edges = 0.5 + np.arange(33) * (3.5 / 32)
    assert np.all(np.diff(d, axis=1) > 0)
    assert np.all(d >= edges[:-1]) and np.all(d <= edges[1:])


def test_midpoint_samples():
    d = stratified_samples(0.5, 4.0, 8)
    assert np.allclose(d, 0.5 + (np.arange(8) + 0.5) * 3.5 / 8)


# --- compositing --------------------------------------------------------------


def test_empty_medium_renders_black():
    rgb, w = volume_render(np.ones((16, 3)), np.zeros(16), stratified_samples(NEAR, FAR, 16), FAR)
    assert np.all(rgb == 0) and np.all(w == 0)


def test_opaque_first_sample():
    rng = np.random.default_rng(0)
    colors = rng.random((16, 3))
    sigmas = np.zeros(16)
    sigmas[0] = 1e6
    rgb, w = volume_render(colors, sigmas, stratified_samples(NEAR, FAR, 16), FAR)
    assert np.allclose(rgb, colors[0], atol=1e-6)
    assert w[0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("c", [0.1, 0.7, 2.5])
def test_constant_medium_matches_analytic(c):
    n, far = 512, 4.0
    depths = np.arange(n) * (far / n)  # bin left edges from depth 0
    _, w = volume_render(np.ones((n, 3)), np.full(n, c), depths, far)
    transmittance = 1 - np.concatenate([[0.0], np.cumsum(w)[:-1]])
    assert np.max(np.abs(transmittance - np.exp(-c * depths))) <= 1e-3
    rgb, _ = volume_render(np.ones((n, 3)), np.full(n, c), depths, far)
    assert np.allclose(rgb, 1 - math.exp(-c * far), atol=1e-3)


def test_weights_nonnegative_and_bounded():
    rng = np.random.default_rng(2)
    sig = rng.exponential(3.0, (500, 32)) * (rng.random((500, 32)) < 0.5)
    depths = stratified_samples(NEAR, FAR, 32, rng, count=500)
    _, w = volume_render(rng.random((500, 32, 3)), sig, depths, FAR)
    assert np.all(w >= 0) and np.all(w.sum(axis=1) <= 1 + 1e-6)


def test_non_monotone_depths_rejected():
    with pytest.raises(InvalidArgument):
        volume_render(np.ones((3, 3)), np.ones(3), np.array([1.0, 0.9, 2.0]), FAR)
    with pytest.raises(InvalidArgument):
        volume_render(np.ones((2, 3)), -np.ones(2), np.array([1.0, 2.0]), FAR)


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    n = 12
    colors = rng.random((4, n, 3))
    sig = rng.exponential(1.5, (4, n))
    depths = stratified_samples(NEAR, FAR, n, rng, count=4)
    up = rng.standard_normal((4, 3))

    def loss(c, s):
        return float(np.sum(volume_render(c, s, depths, FAR)[0] * up))

    _, _, cache = _composite(colors, sig, depths, FAR)
    d_col, d_sig = volume_render_backward(cache, up)
    h = 1e-6
    num_sig = np.zeros_like(sig)
    for idx in np.ndindex(sig.shape):
        e = np.zeros_like(sig)
        e[idx] = h
        num_sig[idx] = (loss(colors, sig + e) - loss(colors, sig - e)) / (2 * h)
    num_col = np.zeros_like(colors)
    for idx in np.ndindex(colors.shape):
        e = np.zeros_like(colors)
        e[idx] = h
        num_col[idx] = (loss(colors + e, sig) - loss(colors - e, sig)) / (2 * h)
    assert np.allclose(d_sig, num_sig, atol=1e-7)
    assert np.allclose(d_col, num_col, atol=1e-7)


# --- networks -----------------------------------------------------------------


def _zero_density_net():
    net = init_network(toy_3d_config(), 0)
    sig = net.layers[-2]
    net.layers[-2] = DenseLayer(np.zeros_like(sig.weights), np.full_like(sig.bias, -1.0), sig.activation)
    return net


def test_zero_density_net_renders_black():
    img = render_view(_zero_density_net(), _cam(8), 16, np.random.default_rng(0))
    assert np.all(img.pixels == 0)


def test_render_deterministic_under_fixed_rng():
    net = init_network(toy_3d_config(), 1)
    a = render_view(net, _cam(8), 16, np.random.default_rng(5))
    b = render_view(net, _cam(8), 16, np.random.default_rng(5))
    assert a == b


def _tiny_views():
    scene = SphereScene((0.0, 0.0, 0.0), 0.45, (0.6, 0.4, 0.3), (0.0,) * 9)
    cams, _ = scene_cameras(size=8, n_train=2)
    return [(c, scene.render(c, steps=64)) for c in cams]


def test_train_zero_iters_is_identity():
    net = init_network(toy_3d_config(), 0)
    out, rep = train_frame_3d(net, _tiny_views(), 0)
    assert out.same_bits(net) and rep.iters == [0]


def test_train_needs_two_views():
    with pytest.raises(InvalidArgument):
        train_frame_3d(init_network(toy_3d_config(), 0), _tiny_views()[:1], 1)


def test_frozen_color_layers_untouched():
    cfg = toy_3d_config(k=3)
    net = init_network(cfg, 0)
    mask = [i >= 3 for i in range(net.num_layers)]
    out, _ = train_frame_3d(net, _tiny_views(), 3, mask, TrainHyper(lr=1e-2, batch_size=64))
    assert split_model(out, 3)[1].tobytes() == split_model(net, 3)[1].tobytes()
    assert split_model(out, 3)[0].tobytes() != split_model(net, 3)[0].tobytes()


# --- synthetic scenes -----------------------------------------------------------


@pytest.fixture(scope="module")
def three_frames():
    return synth_scene_sequence(3, seed=4)


def test_scene_sequence_deterministic(three_frames):
    again = synth_scene_sequence(3, seed=4)
    for a, b in zip(three_frames, again):
        assert all(x == y for x, y in zip(a.train_images, b.train_images))
        assert a.heldout_image == b.heldout_image


def test_scene_sequence_small_motion(three_frames):
    for a, b in zip(three_frames, three_frames[1:]):
        step = np.linalg.norm(np.subtract(b.scene.center, a.scene.center))
        assert step <= 0.02 * 2.0  # scene box is [-1, 1]^3
        diffs = [np.abs(x.pixels - y.pixels).mean() for x, y in zip(a.train_images, b.train_images)]
        assert max(diffs) < 0.02


def test_heldout_camera_not_in_training_set(three_frames):
    fr = three_frames[0]
    assert len(fr.train_cameras) == 8
    assert all(np.linalg.norm(c.position - fr.heldout_camera.position) > 0.1 for c in fr.train_cameras)


def test_scene_field_ranges(three_frames):
    pts = np.random.default_rng(0).uniform(-2, 2, (5000, 3))
    sc = three_frames[0].scene
    assert np.all(sc.sigma(pts) >= 0)
    col = sc.emission(pts)
    assert np.all((col >= 0) & (col <= 1))


def test_quadrature_consistency(three_frames):
    sc, cam = three_frames[0].scene, three_frames[0].heldout_camera
    coarse, fine = sc.render(cam, 256), sc.render(cam, 512)
    assert np.abs(coarse.pixels - fine.pixels).mean() < 1e-2


def test_manifest_roundtrip(tmp_path, three_frames):
    write_scene_sequence(three_frames[:2], tmp_path)
    back = read_scene_manifest(tmp_path / "manifest.txt")
    assert len(back) == 2
    for fr, mf in zip(three_frames, back):
        assert len(mf.views) == 8
        cam, img = mf.views[3]
        assert np.array_equal(cam.rotation, fr.train_cameras[3].rotation)
        assert np.abs(img.pixels - fr.train_images[3].pixels).max() <= 0.5 / 255 + 1e-7
        assert mf.heldout is not None
