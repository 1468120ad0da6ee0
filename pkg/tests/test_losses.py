import numpy as np
import pytest

from headsplat import gradcheck
from headsplat.losses import (dssim, position_loss, rgb_loss, scaling_loss, ssim, ssim_grad, total_loss)


def test_ssim_identity_and_range(rng):
    a = rng.random((16, 16, 3))
    assert np.isclose(ssim(a, a), 1.0)
    assert dssim(a, a) == pytest.approx(0.0, abs=1e-12)
    b = rng.random((16, 16, 3))
    assert -1.0 <= ssim(a, b) < 1.0


def test_ssim_symmetric(rng):
    a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    assert np.isclose(ssim(a, b), ssim(b, a))


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_against_direct_window_sum(rng):
    # explicit 11x11 window sum with zero padding at one pixel
    a, b = rng.random((13, 13, 1)), rng.random((13, 13, 1))
    x = np.arange(11) - 5
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / g.sum() ** 2
    pa, pb = np.pad(a[..., 0], 5), np.pad(b[..., 0], 5)
    vals = []
    for i in range(13):
        for j in range(13):
            wa, wb = pa[i:i + 11, j:j + 11], pb[i:i + 11, j:j + 11]
            mx, my = (w * wa).sum(), (w * wb).sum()
            vx = (w * wa * wa).sum() - mx ** 2
            vy = (w * wb * wb).sum() - my ** 2
            cxy = (w * wa * wb).sum() - mx * my
            c1, c2 = 0.01 ** 2, 0.03 ** 2
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    assert np.isclose(ssim(a, b), np.mean(vals))


@pytest.mark.parametrize("seed", [0, 1])
def test_loss_gradients(seed):
    for name, err in gradcheck.check_losses(seed).items():
        assert err < 1e-5, name


def test_ssim_grad_value_matches(rng):
    a, b = rng.random((10, 10, 3)), rng.random((10, 10, 3))
    assert np.isclose(ssim_grad(a, b)[0], ssim(a, b))


def test_rgb_loss_weights(rng):
    a, b = rng.random((10, 10, 3)), rng.random((10, 10, 3))
    loss, l1, ds = rgb_loss(a, b, lam=0.2)
    assert np.isclose(l1, np.abs(a - b).mean())
    assert np.isclose(loss, 0.8 * l1 + 0.2 * ds)


def test_position_loss_floor():
    v, g = position_loss(np.zeros((4, 3)), eps=1.0)
    assert np.isclose(v, np.sqrt(3.0)) and np.all(g == 0)
    v, g = position_loss(np.array([[2.0, 0.0, 0.0]]), eps=1.0)
    assert np.isclose(v, np.sqrt(6.0))
    assert np.isclose(g[0, 0], 2.0 / np.sqrt(6.0)) and g[0, 1] == 0


def test_scaling_loss_floor():
    v, g = scaling_loss(np.full((2, 3), 0.1), eps=0.6)
    assert np.isclose(v, 0.6 * np.sqrt(3)) and np.all(g == 0)
    assert scaling_loss(np.zeros((0, 3)))[0] == 0.0


def test_total_loss_ignores_invisible(rng):
    G = 6
    img, tgt = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    off = rng.normal(scale=3, size=(G, 3))
    ls = rng.normal(size=(G, 3))
    rep, grads = total_loss(img, tgt, off, ls, [0, 2])
    assert rep.visible_count == 2
    assert np.all(grads.local_offset[[1, 3, 4, 5]] == 0) and np.all(grads.log_scale[[1, 3, 4, 5]] == 0)
    off2 = off.copy()
    off2[[1, 3]] += 100
    rep2, _ = total_loss(img, tgt, off2, ls, [0, 2])
    assert rep2.total == rep.total
    assert np.isclose(rep.total, rep.rgb + 0.01 * rep.position + 1.0 * rep.scaling)
