"""Photometric loss, SSIM and the offset/scale regularizers.

SSIM uses an 11x11 Gaussian window (sigma 1.5) with zero padding,
C1 = 0.01^2 and C2 = 0.03^2, per channel, averaged over pixels and
channels.  The same implementation backs the D-SSIM loss and the metric.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2

RGB_LAMBDA = 0.2
EPS_POSITION = 1.0
EPS_SCALING = 0.6
LAMBDA_POSITION = 0.01
LAMBDA_SCALING = 1.0


def _window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-x ** 2 / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


_WIN = _window()


def _blur(x):
    """Separable Gaussian blur over the two spatial axes, zero padding."""
    y = correlate1d(x, _WIN, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WIN, axis=1, mode="constant", cval=0.0)


def _check(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    A1 = 2 * mx * my + C1
    A2 = 2 * (exy - mx * my) + C2
    B1 = mx * mx + my * my + C1
    B2 = (exx - mx * mx) + (eyy - my * my) + C2
    return mx, my, A1, A2, B1, B2


def ssim(a, b) -> float:
    x, y = _check(a, b)
    _, _, A1, A2, B1, B2 = _ssim_terms(x, y)
    return float(np.mean((A1 * A2) / (B1 * B2)))


def ssim_grad(a, b):
    """``(ssim(a, b), d ssim / d a)``."""
    x, y = _check(a, b)
    mx, my, A1, A2, B1, B2 = _ssim_terms(x, y)
    S = (A1 * A2) / (B1 * B2)
    n = S.size
    den = B1 * B2
    d_mx = (2 * my * (A2 - A1) / den - 2 * mx * S * (1 / B1 - 1 / B2)) / n
    d_exy = 2 * A1 / den / n
    d_exx = -S / B2 / n
    grad = _blur(d_mx) + y * _blur(d_exy) + 2 * x * _blur(d_exx)
    return float(S.mean()), grad.reshape(np.shape(a))


def dssim(a, b) -> float:
    return (1.0 - ssim(a, b)) / 2.0


def rgb_loss(rendered, target, lam=RGB_LAMBDA, with_grad=False):
    """``(1 - lam) * L1 + lam * D-SSIM``; returns ``(loss, l1, dssim[, grad])``."""
    r, t = _check(rendered, target)
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    if with_grad:
        s, gs = ssim_grad(rendered, target)
    else:
        s = ssim(rendered, target)
    ds = (1.0 - s) / 2.0
    loss = (1 - lam) * l1 + lam * ds
    if not with_grad:
        return loss, l1, ds
    g = (1 - lam) * np.sign(diff).reshape(np.shape(rendered)) / diff.size - lam * 0.5 * gs
    return loss, l1, ds, g


def _floored_norm(v, eps):
    v = np.asarray(v, float).reshape(-1, 3)
    if v.shape[0] == 0:
        return 0.0, np.zeros_like(v)
    mag = np.abs(v)
    above = mag > eps
    f = np.where(above, mag, eps)
    norm = np.linalg.norm(f, axis=1)
    grad = np.where(above, np.sign(v) * f, 0.0) / norm[:, None] / v.shape[0]
    return float(norm.mean()), grad


def position_loss(offsets, eps=EPS_POSITION):
    """Mean of ``|max(|mu|, eps)|_2``; returns ``(value, grad)``.

    Components inside the margin get exactly zero gradient.
    """
    return _floored_norm(offsets, eps)


def scaling_loss(scales, eps=EPS_SCALING):
    """Mean of ``|max(s, eps)|_2`` over triangle-relative scales; ``(value, grad)``."""
    return _floored_norm(scales, eps)


@dataclass
class LossReport:
    l1: float
    dssim: float
    rgb: float
    position: float
    scaling: float
    total: float
    visible_count: int

    def as_row(self, iteration):
        return {"iteration": iteration, **asdict(self)}


@dataclass
class LossGrads:
    image: np.ndarray
    local_offset: np.ndarray  # (G, 3), zero outside the visible set
    log_scale: np.ndarray


def total_loss(rendered, target, local_offset, log_scale, visible, lam=RGB_LAMBDA,
               eps_position=EPS_POSITION, eps_scaling=EPS_SCALING,
               lambda_position=LAMBDA_POSITION, lambda_scaling=LAMBDA_SCALING):
    """Weighted objective with regularizers restricted to ``visible`` Gaussians.

    Returns ``(LossReport, LossGrads)``; gradients are for the total.
    """
    visible = np.asarray(visible, dtype=int)
    rgb, l1, ds, g_img = rgb_loss(rendered, target, lam, with_grad=True)
    pos, g_pos = position_loss(local_offset[visible], eps_position)
    s_vis = np.exp(log_scale[visible])
    sc, g_sc = scaling_loss(s_vis, eps_scaling)
    total = rgb + lambda_position * pos + lambda_scaling * sc
    d_off = np.zeros_like(local_offset)
    d_off[visible] = lambda_position * g_pos
    d_ls = np.zeros_like(log_scale)
    d_ls[visible] = lambda_scaling * g_sc * s_vis
    report = LossReport(l1, ds, rgb, pos, sc, total, int(visible.size))
    return report, LossGrads(g_img, d_off, d_ls)
