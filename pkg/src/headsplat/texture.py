"""Triplane texture features fused with the image feature into Gaussian residuals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .binding import sigmoid

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz
OFFSET_SCALE = 0.01


class TextureError(ValueError):
    pass


@dataclass
class Triplane:
    planes: np.ndarray  # (3, n_f, n_f, n_d1), order xy, xz, yz
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, float)
        self.bbox_max = np.asarray(self.bbox_max, float)
        if self.planes.ndim != 4 or self.planes.shape[0] != 3 or self.planes.shape[1] != self.planes.shape[2]:
            raise TextureError(f"triplane grids must be (3, n_f, n_f, n_d1), got {self.planes.shape}")
        if np.any(self.bbox_max - self.bbox_min <= 0):
            raise TextureError("triplane bounding box is degenerate")

    @property
    def resolution(self):
        return self.planes.shape[1]

    @property
    def channels(self):
        return self.planes.shape[3]

    @classmethod
    def zeros(cls, points, resolution=32, channels=8, margin=0.05):
        lo, hi = points.min(axis=0), points.max(axis=0)
        pad = margin * (hi - lo).max()
        return cls(np.zeros((3, resolution, resolution, channels)), lo - pad, hi + pad)


def _plane_coords(tri: Triplane, points):
    u = (np.asarray(points, float) - tri.bbox_min) / (tri.bbox_max - tri.bbox_min)
    g = np.clip(u, 0.0, 1.0) * (tri.resolution - 1)
    out = []
    for a, b in PLANE_AXES:
        gi, gj = g[:, a], g[:, b]
        i0 = np.minimum(np.floor(gi).astype(int), tri.resolution - 2)
        j0 = np.minimum(np.floor(gj).astype(int), tri.resolution - 2)
        out.append((i0, j0, gi - i0, gj - j0))
    return out


def sample_triplane(tri: Triplane, points, planes=None):
    """Bilinear feature of each point on the xy, xz and yz planes, concatenated.

    Points outside the bounding box are clamped to its boundary.  Returns
    ``(N, 3 * n_d1)``.
    """
    P = tri.planes if planes is None else planes
    pts = np.atleast_2d(points)
    feats = []
    for k, (i0, j0, fi, fj) in enumerate(_plane_coords(tri, pts)):
        H = P[k]
        f = ((1 - fi) * (1 - fj))[:, None] * H[i0, j0] + (fi * (1 - fj))[:, None] * H[i0 + 1, j0] \
            + ((1 - fi) * fj)[:, None] * H[i0, j0 + 1] + (fi * fj)[:, None] * H[i0 + 1, j0 + 1]
        feats.append(f)
    return np.concatenate(feats, axis=1)


def sample_triplane_backward(tri: Triplane, points, grad):
    """Gradient w.r.t. the plane grids; only the touched nodes are non-zero."""
    pts = np.atleast_2d(points)
    C = tri.channels
    dP = np.zeros_like(tri.planes)
    for k, (i0, j0, fi, fj) in enumerate(_plane_coords(tri, pts)):
        g = grad[:, k * C:(k + 1) * C]
        for di, dj, w in ((0, 0, (1 - fi) * (1 - fj)), (1, 0, fi * (1 - fj)),
                          (0, 1, (1 - fi) * fj), (1, 1, fi * fj)):
            np.add.at(dP[k], (i0 + di, j0 + dj), w[:, None] * g)
    return dP


class TextureField:
    """Triplane + feature-gated fusion + multi-head residual decoder."""

    HEADS = (("mu", 3), ("s", 3), ("r", 4), ("a", 1))

    def __init__(self, canonical_points, d_feat=64, resolution=32, channels=8, d_attn=32,
                 hidden=128, seed=0, store=None, bbox=None):
        self.d_feat = d_feat
        self.d_attn = d_attn
        if bbox is None:
            tri = Triplane.zeros(canonical_points, resolution, channels)
            bbox = (tri.bbox_min, tri.bbox_max)
        self.bbox = (np.asarray(bbox[0], float), np.asarray(bbox[1], float))
        if store is not None:
            self.store = store
            return
        rng = np.random.default_rng(seed)
        s = nn.ParamStore()
        s.add("tex.planes", np.zeros((3, resolution, resolution, channels)))
        d_h = 3 * channels
        s.add("tex.attn.wg", nn.kaiming_uniform(rng, d_feat, (d_feat, d_attn)))
        s.add("tex.attn.bg", np.zeros(d_attn))
        s.add("tex.attn.wh", nn.kaiming_uniform(rng, d_h, (d_h, d_attn)))
        s.add("tex.attn.bh", np.zeros(d_attn))
        s.add("tex.attn.wf", nn.kaiming_uniform(rng, d_feat, (d_feat, d_attn)))
        s.add("tex.attn.bf", np.zeros(d_attn))
        nn.add_mlp(s, "tex.trunk", [d_attn, hidden, hidden], rng, zero_last=False)
        for name, dim in self.HEADS:
            s.add(f"tex.head_{name}.w", np.zeros((hidden, dim)))
            s.add(f"tex.head_{name}.b", np.zeros(dim))
        self.store = s

    @property
    def triplane(self) -> Triplane:
        return Triplane(self.store["tex.planes"], *self.bbox)

    def attention(self, F, h):
        """``v = sigmoid(F Wg + bg) * (h Wh + bh) + (F Wf + bf)`` per Gaussian."""
        s = self.store
        F = np.asarray(F, float)
        if F.shape != (self.d_feat,):
            raise TextureError(f"image feature has shape {F.shape}, expected ({self.d_feat},)")
        if h.shape[-1] != s["tex.attn.wh"].shape[0]:
            raise TextureError(f"triplane feature width {h.shape[-1]} != {s['tex.attn.wh'].shape[0]}")
        gate = sigmoid(F @ s["tex.attn.wg"] + s["tex.attn.bg"])
        ph = h @ s["tex.attn.wh"] + s["tex.attn.bh"]
        pf = F @ s["tex.attn.wf"] + s["tex.attn.bf"]
        return gate * ph + pf, {"F": F, "h": h, "gate": gate, "ph": ph}

    def attention_backward(self, cache, g):
        """Accumulate parameter grads; return ``(dF, dh)``."""
        s = self.store
        F, h, gate, ph = cache["F"], cache["h"], cache["gate"], cache["ph"]
        dph = g * gate
        dgate = np.sum(g * ph, axis=0)
        dzg = dgate * gate * (1 - gate)
        dpf = g.sum(axis=0)
        s.accumulate("tex.attn.wh", h.T @ dph)
        s.accumulate("tex.attn.bh", dph.sum(axis=0))
        s.accumulate("tex.attn.wg", np.outer(F, dzg))
        s.accumulate("tex.attn.bg", dzg)
        s.accumulate("tex.attn.wf", np.outer(F, dpf))
        s.accumulate("tex.attn.bf", dpf)
        dF = s["tex.attn.wg"] @ dzg + s["tex.attn.wf"] @ dpf
        dh = dph @ s["tex.attn.wh"].T
        return dF, dh

    def decode(self, v, tri_scale):
        """Residuals ``(d_mean, d_scale, d_rot, d_opacity)``; offsets scale with the triangle."""
        s = self.store
        trunk, tcache = nn.mlp(s, "tex.trunk", v)
        hidden = nn.leaky_relu(trunk)
        outs = {name: hidden @ s[f"tex.head_{name}.w"] + s[f"tex.head_{name}.b"] for name, _ in self.HEADS}
        tri_scale = np.asarray(tri_scale, float)
        d_mean = OFFSET_SCALE * tri_scale[:, None] * outs["mu"]
        res = (d_mean, outs["s"], outs["r"], outs["a"][:, 0])
        return res, {"tcache": tcache, "trunk": trunk, "hidden": hidden, "raw_mu": outs["mu"], "tri_scale": tri_scale}

    def decode_backward(self, cache, d_res):
        """Return ``(dv, d_tri_scale)``."""
        s = self.store
        d_mean, d_s, d_r, d_a = d_res
        tri_scale = cache["tri_scale"]
        grads = {"mu": OFFSET_SCALE * tri_scale[:, None] * d_mean, "s": d_s, "r": d_r, "a": np.asarray(d_a)[:, None]}
        d_tri_scale = OFFSET_SCALE * np.sum(d_mean * cache["raw_mu"], axis=1)
        hidden = cache["hidden"]
        dh = np.zeros_like(hidden)
        for name, _ in self.HEADS:
            g = grads[name]
            s.accumulate(f"tex.head_{name}.w", hidden.T @ g)
            s.accumulate(f"tex.head_{name}.b", g.sum(axis=0))
            dh += g @ s[f"tex.head_{name}.w"].T
        dtrunk = nn.leaky_relu_grad(cache["trunk"], dh)
        dv = nn.mlp_backward(s, cache["tcache"], dtrunk)
        return dv, d_tri_scale

    def forward(self, F, canonical_points, tri_scale):
        h = sample_triplane(self.triplane, canonical_points)
        v, acache = self.attention(F, h)
        res, dcache = self.decode(v, tri_scale)
        return res, {"points": canonical_points, "attn": acache, "dec": dcache}

    def backward(self, cache, d_res):
        """Accumulate all parameter grads; return ``(dF, d_tri_scale)``."""
        dv, d_tri_scale = self.decode_backward(cache["dec"], d_res)
        dF, dh = self.attention_backward(cache["attn"], dv)
        self.store.accumulate("tex.planes", sample_triplane_backward(self.triplane, cache["points"], dh))
        return dF, d_tri_scale


def texture_attention(field: TextureField, F, h):
    return field.attention(F, h)[0]


def decode_residuals(field: TextureField, v, tri_scale):
    return field.decode(v, tri_scale)[0]
