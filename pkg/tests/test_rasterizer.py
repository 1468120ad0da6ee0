import numpy as np
import pytest

from headsplat import binding as gb
from headsplat.geometry import quat_to_rotmat
from headsplat.rasterizer import (BLUR, Camera, CameraError, RasterError, Splats, project, rasterize,
                                  rasterize_backward, rasterize_bruteforce, render, visible_set)
from headsplat.sh import C0, SHError, eval_sh, sh_basis


def axis_cam(W=16, H=16, f=20.0):
    return Camera(f, f, (W - 1) / 2, (H - 1) / 2, np.eye(3), np.zeros(3), W, H)


def world(means, scales, opac_logit, rgb_dc, rot=None):
    G = len(means)
    rot = np.tile(np.eye(3), (G, 1, 1)) if rot is None else rot
    sh = (np.asarray(rgb_dc, float) - 0.5)[:, None, :] / C0
    return gb.WorldGaussians(np.asarray(means, float), rot, np.asarray(scales, float),
                             np.asarray(opac_logit, float), sh, np.arange(G))


def test_camera_rejects_reflection():
    R = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(CameraError):
        Camera(10, 10, 5, 5, R, np.zeros(3), 10, 10)
    with pytest.raises(CameraError):
        Camera(-1, 10, 5, 5, np.eye(3), np.zeros(3), 10, 10)


def test_camera_dict_roundtrip():
    c = Camera.look_at([1.0, 2.0, 3.0], [0, 0, 0], [0, 1, 0], 30, 30, 20, 10)
    assert Camera.from_dict(c.to_dict()).to_dict() == c.to_dict()


def test_isotropic_on_axis_covariance():
    cam = axis_cam(f=20.0)
    s, z = 0.2, 4.0
    sp = project(world([[0, 0, z]], [[s, s, s]], [0.0], [[0.5, 0.5, 0.5]]), cam)
    expect = (20.0 * s / z) ** 2 * np.eye(2) + BLUR * np.eye(2)
    assert np.allclose(sp.cov2d[0], expect)
    assert np.allclose(sp.mean2d[0], [cam.cx, cam.cy])


def test_near_plane_culls():
    cam = axis_cam()
    sp = project(world([[0, 0, cam.near / 2]], [[0.1] * 3], [0.0], [[1, 1, 1]]), cam)
    assert len(sp) == 0


def test_offscreen_culls():
    cam = axis_cam()
    sp = project(world([[100.0, 0, 2.0]], [[0.01] * 3], [0.0], [[1, 1, 1]]), cam)
    assert len(sp) == 0


def _splats(rng, M, W, H):
    mean = rng.uniform(-3, [W + 3, H + 3], size=(M, 2))
    A = rng.normal(size=(M, 2, 2)) * rng.uniform(0.5, 3.0, size=(M, 1, 1))
    cov = A @ np.swapaxes(A, 1, 2) + BLUR * np.eye(2)
    return Splats(mean, cov, rng.uniform(1, 10, M), rng.random((M, 3)), rng.uniform(0.05, 1.0, M),
                  np.arange(M), M)


def test_empty_scene_is_background():
    sp = Splats(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
                np.zeros(0, int), 0)
    out = rasterize(sp, 8, 6, background=[0.2, 0.3, 0.4])
    assert np.allclose(out.image, [0.2, 0.3, 0.4]) and np.all(out.alpha_map == 0)


def test_single_opaque_splat_pixel_color():
    sp = Splats(np.array([[3.0, 2.0]]), np.array([np.eye(2)]), np.array([1.0]), np.array([[0.9, 0.1, 0.4]]),
                np.array([1.0]), np.array([0]), 1)
    out = rasterize(sp, 8, 6)
    # alpha clamps at 0.99 exactly at the center
    assert np.allclose(out.image[2, 3], 0.99 * np.array([0.9, 0.1, 0.4]))


def test_two_layer_blend_by_hand():
    cov = np.array([np.eye(2), np.eye(2)])
    sp = Splats(np.array([[2.0, 2.0], [2.0, 2.0]]), cov, np.array([1.0, 2.0]),
                np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([1.0, 0.6]), np.array([0, 1]), 2)
    out = rasterize(sp, 5, 5)
    expect = 0.99 * np.array([1, 0, 0]) + 0.01 * 0.6 * np.array([0, 1, 0])
    assert np.allclose(out.image[2, 2], expect)


def test_tiled_equals_bruteforce(rng):
    worst = 0.0
    for _ in range(20):
        sp = _splats(rng, int(rng.integers(0, 51)), 32, 32)
        bg = rng.random(3)
        a = rasterize(sp, 32, 32, bg, tile_size=8)
        b = rasterize_bruteforce(sp, 32, 32, bg)
        worst = max(worst, np.abs(a.image - b.image).max(), np.abs(a.alpha_map - b.alpha_map).max())
        assert np.allclose(a.max_contribution, b.max_contribution)
    assert worst < 1e-5


def test_permutation_invariance(rng):
    sp = _splats(rng, 30, 24, 24)
    perm = rng.permutation(30)
    shuffled = Splats(sp.mean2d[perm], sp.cov2d[perm], sp.depth[perm], sp.rgb[perm], sp.opacity[perm],
                      sp.source[perm], sp.n_sources)
    assert np.array_equal(rasterize(sp, 24, 24).image, rasterize(shuffled, 24, 24).image)


def test_alpha_and_energy_bounds(rng):
    sp = _splats(rng, 40, 20, 20)
    out = rasterize(sp, 20, 20)
    assert out.alpha_map.max() <= 1.0 and out.alpha_map.min() >= 0.0
    assert out.image.max() <= sp.rgb.max() + 1e-12


def test_backward_requires_state():
    from headsplat.rasterizer import RenderOutput
    with pytest.raises(RasterError):
        rasterize_backward(RenderOutput(np.zeros((2, 2, 3)), np.zeros((2, 2)), np.zeros(0)), np.zeros((2, 2, 3)))


def test_occluded_splat_gets_no_gradient():
    # three opaque layers drive T below T_MIN at the center pixel; the fourth is skipped there
    cov = np.array([np.eye(2) * 0.3] * 4)
    sp = Splats(np.array([[2.0, 2.0]] * 4), cov, np.arange(1.0, 5.0), np.ones((4, 3)), np.ones(4),
                np.arange(4), 4)
    out = rasterize(sp, 5, 5)
    gimg = np.zeros((5, 5, 3))
    gimg[2, 2] = 1.0
    g = rasterize_backward(out, gimg)
    assert np.all(g.rgb[2] > 0.0)  # opacity grad is zero here: alpha sits on the 0.99 clamp
    assert g.opacity[3] == 0.0 and np.all(g.rgb[3] == 0.0) and np.all(g.mean2d[3] == 0.0)


def test_single_splat_opacity_derivative():
    mean = np.array([[2.3, 1.7]])
    cov = np.array([[[2.0, 0.3], [0.3, 1.5]]])
    sp = Splats(mean, cov, np.array([1.0]), np.array([[0.2, 0.7, 0.4]]), np.array([0.4]), np.array([0]), 1)
    out = rasterize(sp, 5, 4)
    gimg = np.zeros((4, 5, 3))
    gimg[2, 3, 1] = 1.0
    g = rasterize_backward(out, gimg)
    d = np.array([3.0, 2.0]) - mean[0]
    expect = 0.7 * np.exp(-0.5 * d @ np.linalg.inv(cov[0]) @ d)
    assert np.isclose(g.opacity[0], expect)


def test_visible_set():
    cam = axis_cam()
    # two opaque front splats leave T = 1e-4 for the small one behind them
    w = world([[0, 0, 2.0], [0, 0, 2.5], [0, 0, 3.0]], [[0.3] * 3, [0.3] * 3, [0.05] * 3],
              [10.0, 10.0, 0.0], [[1, 0, 0]] * 3)
    out = render(w, cam)
    vis = set(visible_set(out).tolist())
    assert {0, 1} <= vis and 2 not in vis
    lone = render(world([[0, 0, 2.0]], [[0.1] * 3], [0.0], [[1, 1, 1]]), cam)
    assert visible_set(lone).tolist() == [0]


def test_sh_degree0_constant_and_value(rng):
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rgb = eval_sh(np.ones((5, 1, 3)), dirs)
    assert np.allclose(rgb, 0.5 + 1 / (2 * np.sqrt(np.pi)))
    assert np.allclose(rgb[0, 0], 0.782094, atol=1e-6)


def test_sh_degree1_axis_table():
    dirs = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    B, _ = sh_basis(dirs, 1)
    C1 = 0.4886025119029199
    # Y_1 = -C1 y, Y_2 = C1 z, Y_3 = -C1 x
    table = np.array([[C0, 0, 0, -C1], [C0, 0, 0, C1], [C0, -C1, 0, 0], [C0, C1, 0, 0],
                      [C0, 0, C1, 0], [C0, 0, -C1, 0]])
    assert np.allclose(B, table)


def test_sh_rejects_degree():
    with pytest.raises(SHError):
        sh_basis(np.array([[0, 0, 1.0]]), 4)
