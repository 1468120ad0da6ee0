"""Differentiable splatting of anisotropic 3D Gaussians on the CPU.

Forward pass: pinhole projection with the local affine (EWA) approximation,
then depth-sorted front-to-back alpha compositing over 16x16 tiles.  A
splat only touches pixels inside its 3-sigma ellipse, which is also the
culling test, so tiling never changes the result.
:func:`rasterize_bruteforce` composites pixel-parallel and splat-sequential
without tiles and is the conformance reference for :func:`rasterize`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binding import WorldGaussians, WorldGrads, sigmoid
from .geometry import normalize_backward
from .sh import sh_basis

BLUR = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
SIGMA_CUT = 3.0
TILE = 16


class CameraError(ValueError):
    pass


class RasterError(RuntimeError):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.R = np.asarray(self.R, float).reshape(3, 3)
        self.t = np.asarray(self.t, float).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6:
            raise CameraError("camera rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise CameraError("camera rotation must have determinant +1")

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.R.reshape(-1).tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.asarray(d["R"], float).reshape(3, 3), np.asarray(d["t"], float),
                   int(d["width"]), int(d["height"]), float(d.get("near", 0.01)))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y points down."""
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, R, -R @ eye, width, height)


@dataclass
class Splats:
    mean2d: np.ndarray  # (M, 2) pixels
    cov2d: np.ndarray  # (M, 2, 2)
    depth: np.ndarray  # (M,)
    rgb: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    source: np.ndarray  # (M,)
    n_sources: int = 0
    cache: dict | None = field(default=None, repr=False)

    def __len__(self):
        return self.mean2d.shape[0]

    def subset(self, idx) -> "Splats":
        return Splats(self.mean2d[idx], self.cov2d[idx], self.depth[idx], self.rgb[idx],
                      self.opacity[idx], self.source[idx], self.n_sources)


@dataclass
class SplatGrads:
    mean2d: np.ndarray
    cov2d: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    alpha_map: np.ndarray  # (H, W)
    max_contribution: np.ndarray  # (n_sources,)
    state: dict | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# projection


def project(world: WorldGaussians, cam: Camera) -> Splats:
    """Project world Gaussians; culled ones are simply absent from the result."""
    pc = world.mean @ cam.R.T + cam.t
    Z = pc[:, 2]
    front = Z > cam.near
    idx = np.flatnonzero(front)
    pc = pc[idx]
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    Jm = np.zeros((idx.size, 2, 3))
    Jm[:, 0, 0] = cam.fx / Z
    Jm[:, 0, 2] = -cam.fx * X / Z ** 2
    Jm[:, 1, 1] = cam.fy / Z
    Jm[:, 1, 2] = -cam.fy * Y / Z ** 2
    Rg = world.rotation[idx]
    s2 = world.scale[idx] ** 2
    Sigma = (Rg * s2[:, None, :]) @ np.swapaxes(Rg, 1, 2)
    M = Jm @ cam.R
    cov = M @ Sigma @ np.swapaxes(M, 1, 2) + BLUR * np.eye(2)
    mean2d = np.stack([cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy], axis=1)
    ex = SIGMA_CUT * np.sqrt(cov[:, 0, 0])
    ey = SIGMA_CUT * np.sqrt(cov[:, 1, 1])
    onscreen = ((mean2d[:, 0] + ex >= 0) & (mean2d[:, 0] - ex <= cam.width - 1)
                & (mean2d[:, 1] + ey >= 0) & (mean2d[:, 1] - ey <= cam.height - 1))
    keep = np.flatnonzero(onscreen)
    idx = idx[keep]
    Jm, M, Sigma, cov, mean2d = Jm[keep], M[keep], Sigma[keep], cov[keep], mean2d[keep]
    pc = pc[keep]

    coeffs = world.sh_coeffs[idx]
    degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    dvec = world.mean[idx] - cam.center
    dnorm = np.linalg.norm(dvec, axis=1, keepdims=True)
    dirs = dvec / dnorm
    B, dB = sh_basis(dirs, degree)
    raw_rgb = np.einsum("nk,nkc->nc", B, coeffs) + 0.5
    rgb = np.maximum(raw_rgb, 0.0)
    opacity = sigmoid(world.opacity_logit[idx])
    cache = {"idx": idx, "pc": pc, "J": Jm, "M": M, "Sigma": Sigma, "cam": cam, "B": B, "dB": dB,
             "dirs": dirs, "dnorm": dnorm, "raw_rgb": raw_rgb, "world": world}
    return Splats(mean2d, cov, pc[:, 2].copy(), rgb, opacity, world.source[idx], len(world), cache)


def project_backward(splats: Splats, g: SplatGrads) -> WorldGrads:
    c = splats.cache
    if c is None:
        raise RasterError("splats carry no projection state")
    world, cam, idx = c["world"], c["cam"], c["idx"]
    out = WorldGrads.zeros_like(world)
    X, Y, Z = c["pc"][:, 0], c["pc"][:, 1], c["pc"][:, 2]
    fx, fy = cam.fx, cam.fy
    dpc = np.zeros_like(c["pc"])
    dpc[:, 0] += g.mean2d[:, 0] * fx / Z
    dpc[:, 2] += -g.mean2d[:, 0] * fx * X / Z ** 2
    dpc[:, 1] += g.mean2d[:, 1] * fy / Z
    dpc[:, 2] += -g.mean2d[:, 1] * fy * Y / Z ** 2

    G2 = g.cov2d
    M, Sigma = c["M"], c["Sigma"]
    MT = np.swapaxes(M, 1, 2)
    dSigma = MT @ G2 @ M
    dM = (G2 + np.swapaxes(G2, 1, 2)) @ M @ Sigma
    dJ = dM @ cam.R.T
    dpc[:, 0] += dJ[:, 0, 2] * (-fx / Z ** 2)
    dpc[:, 1] += dJ[:, 1, 2] * (-fy / Z ** 2)
    dpc[:, 2] += (dJ[:, 0, 0] * (-fx / Z ** 2) + dJ[:, 0, 2] * (2 * fx * X / Z ** 3)
                  + dJ[:, 1, 1] * (-fy / Z ** 2) + dJ[:, 1, 2] * (2 * fy * Y / Z ** 3))
    dmean = dpc @ cam.R

    Rg = world.rotation[idx]
    s = world.scale[idx]
    dSym = dSigma + np.swapaxes(dSigma, 1, 2)
    out.rotation[idx] = dSym @ Rg * (s ** 2)[:, None, :]
    out.scale[idx] = 2 * s * np.einsum("nab,nac,ncb->nb", Rg, dSigma, Rg)

    drgb = np.where(c["raw_rgb"] > 0, g.rgb, 0.0)
    out.sh_coeffs[idx] = np.einsum("nk,nc->nkc", c["B"], drgb)
    coeffs = world.sh_coeffs[idx]
    ddir = np.einsum("nc,nkc,nkd->nd", drgb, coeffs, c["dB"])
    dmean += normalize_backward(c["dirs"], c["dnorm"], ddir)
    out.mean[idx] = dmean
    o = splats.opacity
    out.opacity_logit[idx] = g.opacity * o * (1 - o)
    return out


# ---------------------------------------------------------------------------
# compositing


def _sorted_order(splats: Splats):
    return np.lexsort((splats.source, splats.depth))


def _conic(cov):
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    Q = np.empty_like(cov)
    Q[:, 0, 0] = cov[:, 1, 1] / det
    Q[:, 1, 1] = cov[:, 0, 0] / det
    Q[:, 0, 1] = -cov[:, 0, 1] / det
    Q[:, 1, 0] = -cov[:, 1, 0] / det
    return Q


def _background(background):
    return np.zeros(3) if background is None else np.broadcast_to(np.asarray(background, float), (3,))


def rasterize(splats: Splats, width: int, height: int, background=None, tile_size: int = TILE) -> RenderOutput:
    """Tiled front-to-back compositing; keeps the state needed for backward."""
    bg = _background(background)
    order = _sorted_order(splats)
    s = splats.subset(order)
    Q = _conic(s.cov2d)
    ex = SIGMA_CUT * np.sqrt(s.cov2d[:, 0, 0])
    ey = SIGMA_CUT * np.sqrt(s.cov2d[:, 1, 1])
    image = np.empty((height, width, 3))
    alpha_map = np.empty((height, width))
    max_c = np.zeros(max(splats.n_sources, int(splats.source.max(initial=-1)) + 1))
    tiles = []
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            y1, x1 = min(y0 + tile_size, height), min(x0 + tile_size, width)
            sel = np.flatnonzero((s.mean2d[:, 0] + ex >= x0) & (s.mean2d[:, 0] - ex <= x1 - 1)
                                 & (s.mean2d[:, 1] + ey >= y0) & (s.mean2d[:, 1] - ey <= y1 - 1))
            yy, xx = np.mgrid[y0:y1, x0:x1]
            pix = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
            P = pix.shape[0]
            if sel.size == 0:
                image[y0:y1, x0:x1] = bg
                alpha_map[y0:y1, x0:x1] = 0.0
                tiles.append(None)
                continue
            d = pix[:, None, :] - s.mean2d[sel][None, :, :]
            q = Q[sel]
            dx, dy = d[..., 0], d[..., 1]
            m = q[:, 0, 0] * dx * dx + (q[:, 0, 1] + q[:, 1, 0]) * (dx * dy) + q[:, 1, 1] * dy * dy
            inside = m <= SIGMA_CUT ** 2
            gauss = np.exp(-0.5 * m)
            raw = s.opacity[sel][None, :] * gauss
            a = np.where(inside, np.minimum(raw, ALPHA_MAX), 0.0)
            T_incl = np.cumprod(1.0 - a, axis=1)
            T_before = np.concatenate([np.ones((P, 1)), T_incl[:, :-1]], axis=1)
            active = T_before >= T_MIN
            w = a * T_before * active
            n_active = active.sum(axis=1)
            T_final = np.where(n_active > 0, T_incl[np.arange(P), np.maximum(n_active - 1, 0)], 1.0)
            color = w @ s.rgb[sel] + T_final[:, None] * bg
            image[y0:y1, x0:x1] = color.reshape(y1 - y0, x1 - x0, 3)
            alpha_map[y0:y1, x0:x1] = (1.0 - T_final).reshape(y1 - y0, x1 - x0)
            np.maximum.at(max_c, s.source[sel], w.max(axis=0))
            tiles.append({"sel": sel, "rows": (y0, y1, x0, x1), "d": d, "Q": q, "inside": inside,
                          "gauss": gauss, "raw": raw, "a": a, "T_before": T_before, "active": active,
                          "w": w, "T_final": T_final})
    state = {"order": order, "sorted": s, "tiles": tiles, "bg": bg, "n": len(splats)}
    return RenderOutput(image, alpha_map, max_c, state)


def rasterize_bruteforce(splats: Splats, width: int, height: int, background=None) -> RenderOutput:
    """Reference compositor: every splat against every pixel, one splat at a time."""
    bg = _background(background)
    order = _sorted_order(splats)
    yy, xx = np.mgrid[0:height, 0:width]
    px = xx.ravel().astype(float)
    py = yy.ravel().astype(float)
    T = np.ones(px.size)
    C = np.zeros((px.size, 3))
    max_c = np.zeros(max(splats.n_sources, int(splats.source.max(initial=-1)) + 1))
    for i in order:
        inv = np.linalg.inv(splats.cov2d[i])
        dx = px - splats.mean2d[i, 0]
        dy = py - splats.mean2d[i, 1]
        m = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
        alpha = np.minimum(splats.opacity[i] * np.exp(-0.5 * m), ALPHA_MAX)
        alpha = np.where(m <= SIGMA_CUT ** 2, alpha, 0.0)
        alive = T >= T_MIN
        contrib = np.where(alive, alpha * T, 0.0)
        C += contrib[:, None] * splats.rgb[i]
        T = np.where(alive, T * (1.0 - alpha), T)
        max_c[splats.source[i]] = max(max_c[splats.source[i]], contrib.max(initial=0.0))
    C += T[:, None] * bg
    return RenderOutput(C.reshape(height, width, 3), (1.0 - T).reshape(height, width), max_c)


def rasterize_backward(output: RenderOutput, grad_image) -> SplatGrads:
    """Gradients of a scalar loss w.r.t. every splat field (input order)."""
    st = output.state
    if st is None:
        raise RasterError("rasterize_backward needs the retained forward state")
    s = st["sorted"]
    M = st["n"]
    bg = st["bg"]
    g_mean = np.zeros((M, 2))
    g_cov = np.zeros((M, 2, 2))
    g_rgb = np.zeros((M, 3))
    g_op = np.zeros(M)
    for tile in st["tiles"]:
        if tile is None:
            continue
        y0, y1, x0, x1 = tile["rows"]
        gC = np.asarray(grad_image[y0:y1, x0:x1], float).reshape(-1, 3)
        sel = tile["sel"]
        rgb = s.rgb[sel]
        w, a, T_before = tile["w"], tile["a"], tile["T_before"]
        g_rgb[sel] += w.T @ gC
        # d color / d alpha_i = T_i c_i - (contributions behind i) / (1 - alpha_i), dotted with gC
        r = gC @ rgb.T
        u = w * r
        behind = u.sum(axis=1, keepdims=True) - np.cumsum(u, axis=1) + (tile["T_final"] * (gC @ bg))[:, None]
        da = (T_before * r - behind / (1.0 - a)) * tile["active"]
        live = tile["inside"] & (tile["raw"] < ALPHA_MAX)
        draw = np.where(live, da, 0.0)
        g_op[sel] += np.sum(draw * tile["gauss"], axis=0)
        dm = -0.5 * draw * tile["raw"]
        dx, dy = tile["d"][..., 0], tile["d"][..., 1]
        q = tile["Q"]
        qs = q + np.swapaxes(q, 1, 2)
        s1 = np.stack([np.sum(dm * dx, axis=0), np.sum(dm * dy, axis=0)], axis=1)
        g_mean[sel] -= np.einsum("gab,gb->ga", qs, s1)
        sxy = np.sum(dm * dx * dy, axis=0)
        dQ = np.empty((sel.size, 2, 2))
        dQ[:, 0, 0] = np.sum(dm * dx * dx, axis=0)
        dQ[:, 0, 1] = sxy
        dQ[:, 1, 0] = sxy
        dQ[:, 1, 1] = np.sum(dm * dy * dy, axis=0)
        qT = np.swapaxes(q, 1, 2)
        g_cov[sel] -= qT @ dQ @ qT
    inv = np.empty(M, dtype=int)
    inv[st["order"]] = np.arange(M)
    return SplatGrads(g_mean[inv], g_cov[inv], g_rgb[inv], g_op[inv])


def render(world: WorldGaussians, cam: Camera, background=None, tile_size: int = TILE) -> RenderOutput:
    splats = project(world, cam)
    out = rasterize(splats, cam.width, cam.height, background, tile_size)
    out.state["splats"] = splats
    return out


def render_backward(output: RenderOutput, grad_image) -> WorldGrads:
    return project_backward(output.state["splats"], rasterize_backward(output, grad_image))


def visible_set(output: RenderOutput, threshold: float = 1e-3) -> np.ndarray:
    """Indices of Gaussians whose peak per-pixel weight exceeds ``threshold``."""
    return np.flatnonzero(output.max_contribution > threshold)
