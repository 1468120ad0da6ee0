import numpy as np
import pytest

from headsplat import gradcheck
from headsplat.texture import (TextureError, TextureField, Triplane, decode_residuals, sample_triplane,
                               texture_attention)


def test_sample_node_and_midpoint(rng):
    planes = rng.normal(size=(3, 4, 4, 2))
    tri = Triplane(planes, [0, 0, 0], [3, 3, 3])
    f = sample_triplane(tri, np.array([[1.0, 2.0, 3.0]]))
    assert np.allclose(f[0, :2], planes[0, 1, 2])
    assert np.allclose(f[0, 2:4], planes[1, 1, 3])
    assert np.allclose(f[0, 4:], planes[2, 2, 3])
    mid = sample_triplane(tri, np.array([[0.5, 0.0, 0.0]]))
    assert np.allclose(mid[0, :2], 0.5 * (planes[0, 0, 0] + planes[0, 1, 0]))


def test_sample_clamps_outside(rng):
    tri = Triplane(rng.normal(size=(3, 5, 5, 3)), [0, 0, 0], [1, 1, 1])
    a = sample_triplane(tri, np.array([[5.0, -2.0, 0.5]]))
    b = sample_triplane(tri, np.array([[1.0, 0.0, 0.5]]))
    assert np.allclose(a, b)


def test_sample_affine_field_is_exact(rng):
    # bilinear interpolation reproduces a field that is affine in the grid coordinates
    n = 6
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    planes = np.stack([(2 * i + 3 * j + 1.0)[..., None]] * 3)
    tri = Triplane(planes, [0, 0, 0], [1, 1, 1])
    p = rng.random((20, 3))
    f = sample_triplane(tri, p)
    g = p * (n - 1)
    assert np.allclose(f[:, 0], 2 * g[:, 0] + 3 * g[:, 1] + 1)
    assert np.allclose(f[:, 1], 2 * g[:, 0] + 3 * g[:, 2] + 1)
    assert np.allclose(f[:, 2], 2 * g[:, 1] + 3 * g[:, 2] + 1)


def test_triplane_validation():
    with pytest.raises(TextureError):
        Triplane(np.zeros((3, 4, 5, 2)), [0, 0, 0], [1, 1, 1])
    with pytest.raises(TextureError):
        Triplane(np.zeros((3, 4, 4, 2)), [0, 0, 0], [1, 0, 1])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_triplane_gradient(seed):
    assert gradcheck.check_triplane(seed)["triplane.planes"] < 1e-6


def _field(rng, G=10):
    pts = rng.normal(size=(G, 3))
    return TextureField(pts, d_feat=8, resolution=6, channels=2, d_attn=4, hidden=8, seed=0), pts


def test_fresh_field_emits_zero_residuals(rng):
    field, pts = _field(rng)
    (dm, ds, dr, da), _ = field.forward(rng.normal(size=8), pts, np.ones(len(pts)))
    assert all(np.all(x == 0) for x in (dm, ds, dr, da))
    assert dm.shape == (10, 3) and dr.shape == (10, 4) and da.shape == (10,)


def test_gated_fusion_formula(rng):
    field, pts = _field(rng)
    s = field.store
    F = rng.normal(size=8)
    h = rng.normal(size=(5, 6))
    v = texture_attention(field, F, h)
    gate = 1 / (1 + np.exp(-(F @ s["tex.attn.wg"] + s["tex.attn.bg"])))
    expect = gate * (h @ s["tex.attn.wh"] + s["tex.attn.bh"]) + F @ s["tex.attn.wf"] + s["tex.attn.bf"]
    assert np.allclose(v, expect)


def test_offset_scales_with_triangle(rng):
    field, pts = _field(rng)
    for name, _ in field.HEADS:
        field.store[f"tex.head_{name}.w"] = rng.normal(size=field.store[f"tex.head_{name}.w"].shape)
    v = rng.normal(size=(10, 4))
    a = decode_residuals(field, v, np.ones(10))
    b = decode_residuals(field, v, np.full(10, 3.0))
    assert np.allclose(b[0], 3 * a[0])
    assert np.allclose(b[1], a[1]) and np.allclose(b[3], a[3])


def test_attention_shape_errors(rng):
    field, _ = _field(rng)
    with pytest.raises(TextureError):
        field.attention(np.zeros(7), np.zeros((3, 6)))
    with pytest.raises(TextureError):
        field.attention(np.zeros(8), np.zeros((3, 5)))


def _lerp_oracle(tri, p):
    out = []
    for plane, (a, b) in enumerate(((0, 1), (0, 2), (1, 2))):
        n = tri.resolution
        gi = np.clip((p[a] - tri.bbox_min[a]) / (tri.bbox_max[a] - tri.bbox_min[a]), 0, 1) * (n - 1)
        gj = np.clip((p[b] - tri.bbox_min[b]) / (tri.bbox_max[b] - tri.bbox_min[b]), 0, 1) * (n - 1)
        i0, j0 = min(int(gi), n - 2), min(int(gj), n - 2)
        fi, fj = gi - i0, gj - j0
        H = tri.planes[plane]
        top = H[i0, j0] + fi * (H[i0 + 1, j0] - H[i0, j0])
        bot = H[i0, j0 + 1] + fi * (H[i0 + 1, j0 + 1] - H[i0, j0 + 1])
        out.append(top + fj * (bot - top))
    return np.concatenate(out)


def test_sample_matches_gather_and_lerp_oracle(rng):
    tri = Triplane(rng.normal(size=(3, 7, 7, 3)), [-1, -1, -1], [1, 2, 1])
    pts = rng.uniform(-1.2, 2.2, size=(1000, 3))
    got = sample_triplane(tri, pts)
    want = np.stack([_lerp_oracle(tri, p) for p in pts])
    assert np.abs(got - want).max() < 1e-7


def test_plane_gradient_touches_at_most_twelve_nodes(rng):
    from headsplat.texture import sample_triplane_backward
    tri = Triplane(np.zeros((3, 6, 6, 2)), [0, 0, 0], [1, 1, 1])
    g = sample_triplane_backward(tri, rng.random((1, 3)), np.ones((1, 6)))
    assert np.count_nonzero(np.abs(g).sum(axis=-1)) <= 12


def test_zero_inputs_give_zero_fusion(rng):
    field, _ = _field(rng)
    assert np.all(texture_attention(field, np.zeros(8), np.zeros((3, 6))) == 0)


def test_saturated_gate_ignores_triplane(rng):
    field, _ = _field(rng)
    field.store["tex.attn.bg"] = np.full(4, -1e4)
    F = rng.normal(size=8)
    a = texture_attention(field, F, rng.normal(size=(3, 6)))
    b = texture_attention(field, F, rng.normal(size=(3, 6)))
    assert np.array_equal(a, b)


def test_canonical_points_ignore_expression(tiny_dataset):
    from headsplat import trainer as tr
    cfg = tr.TrainConfig(iterations=0, d_feat=16, hidden=16, triplane_resolution=8, triplane_channels=4,
                         d_attn=8).with_ablation("multi-view-t")
    av = tr.init_avatar(cfg, tiny_dataset)
    av.tex.store["tex.planes"] = np.random.default_rng(0).normal(size=av.tex.store["tex.planes"].shape)
    h0 = sample_triplane(av.tex.triplane, av.canonical_points())
    for p in av.params:
        p.expression = p.expression + 0.5
    h1 = sample_triplane(av.tex.triplane, av.canonical_points())
    assert np.array_equal(h0, h1)
