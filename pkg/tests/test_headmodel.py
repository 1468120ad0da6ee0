import dataclasses
import json

import numpy as np
import pytest

from headsplat.headmodel import (HeadModel, HeadModelError, HeadParams, Mesh, evaluate, evaluate_backward,
                                 load_head_model, save_head_model, triangle_frames, triangle_frames_backward)
from headsplat.testing import numeric_grad, random_head_model, rel_err


def _f32_model(rng, **kw):
    m = random_head_model(rng, **kw)
    fields = {f.name: getattr(m, f.name) for f in dataclasses.fields(m)}
    for k, v in fields.items():
        if k not in ("faces", "joint_parents"):
            fields[k] = v.astype(np.float32).astype(np.float64)
    w = fields["skinning_weights"]
    fields["skinning_weights"] = w / w.sum(axis=1, keepdims=True)
    return HeadModel(**fields)


def test_save_load_roundtrip(tmp_path, rng):
    m = _f32_model(rng)
    path = tmp_path / "h.ghm"
    save_head_model(m, path)
    back = load_head_model(path)
    for f in dataclasses.fields(m):
        assert np.allclose(getattr(back, f.name), getattr(m, f.name), atol=1e-7), f.name
    dims = json.loads((tmp_path / "h.ghm.json").read_text())
    assert dims["V"] == m.n_vertices


def test_load_rejects_nonconvex_skinning_row(tmp_path, rng):
    m = _f32_model(rng)
    W = m.skinning_weights.copy()
    W[3] *= 0.5
    bad = dataclasses.replace(m, skinning_weights=W)
    path = tmp_path / "bad.ghm"
    save_head_model(bad, path)  # saving does not validate; loading must
    with pytest.raises(HeadModelError, match="skinning_weights row 3 not convex"):
        load_head_model(path)


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.ghm"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(HeadModelError):
        load_head_model(p)


def test_full_size_bases_load(tmp_path, rng):
    m = _f32_model(rng, V=8, F=4, n_shape=300, n_expr=100)
    save_head_model(m, tmp_path / "big.ghm")
    back = load_head_model(tmp_path / "big.ghm")
    assert (back.n_shape, back.n_expr) == (300, 100)


def test_zero_params_give_template(rng):
    m = random_head_model(rng)
    m = dataclasses.replace(m, vertex_offsets=np.zeros_like(m.vertex_offsets))
    assert np.array_equal(evaluate(m, HeadParams.zeros(m)).vertices, m.template_vertices)


def test_expression_is_linear_at_identity_pose(rng):
    m = random_head_model(rng)
    m = dataclasses.replace(m, vertex_offsets=np.zeros_like(m.vertex_offsets))
    p = HeadParams.zeros(m)
    p.expression[2] = 0.7
    v = evaluate(m, p).vertices
    assert np.allclose(v, m.template_vertices + 0.7 * m.expression_basis[:, :, 2], atol=1e-12)
    a, b = 0.3, -1.4
    p1, p2 = HeadParams.zeros(m), HeadParams.zeros(m)
    p1.expression, p2.expression = rng.normal(size=m.n_expr), rng.normal(size=m.n_expr)
    pc = HeadParams.zeros(m)
    pc.expression = a * p1.expression + b * p2.expression
    lhs = evaluate(m, pc).vertices
    rhs = a * evaluate(m, p1).vertices + b * evaluate(m, p2).vertices - (a + b - 1) * m.template_vertices
    assert np.abs(lhs - rhs).max() < 1e-6


def test_translation_shifts_every_vertex(rng):
    m = random_head_model(rng)
    p = HeadParams.zeros(m)
    base = evaluate(m, p).vertices
    p.rigid[3:] = [0.5, -1.0, 2.0]
    assert np.allclose(evaluate(m, p).vertices - base, [0.5, -1.0, 2.0], atol=1e-12)


def test_rigid_motion_preserves_distances(rng):
    m = random_head_model(rng)
    p = HeadParams.zeros(m)
    p.joint_rotations = rng.normal(scale=0.3, size=p.joint_rotations.shape)
    v0 = evaluate(m, p).vertices
    p.rigid = rng.normal(size=6)
    v1 = evaluate(m, p).vertices
    d0 = np.linalg.norm(v0[:, None] - v0[None], axis=2)
    d1 = np.linalg.norm(v1[:, None] - v1[None], axis=2)
    assert np.abs(d0 - d1).max() < 1e-9


def test_dimension_mismatch_rejected(rng):
    m = random_head_model(rng)
    p = HeadParams.zeros(m)
    p.expression = np.zeros(m.n_expr + 1)
    with pytest.raises(HeadModelError, match="expression"):
        evaluate(m, p)


def test_validate_catches_bad_faces_and_cycles(rng):
    m = random_head_model(rng)
    with pytest.raises(HeadModelError):
        dataclasses.replace(m, faces=m.faces + m.n_vertices).validate()
    parents = m.joint_parents.copy()
    parents[0] = 1
    with pytest.raises(HeadModelError):
        dataclasses.replace(m, joint_parents=parents).validate()


@pytest.mark.parametrize("seed", range(50))
def test_evaluate_jacobian_matches_fd(seed):
    rng = np.random.default_rng(seed)
    m = random_head_model(rng)
    p = HeadParams(rng.normal(scale=0.5, size=6), rng.normal(scale=0.4, size=(5, 3)),
                   rng.normal(size=m.n_shape), rng.normal(size=m.n_expr))
    Wv = rng.normal(size=(m.n_vertices, 3))
    g = evaluate_backward(m, evaluate(m, p), Wv)
    f = lambda: float(np.sum(evaluate(m, p).vertices * Wv))
    for name, attr in (("rigid", "rigid"), ("joint_rotations", "joint_rotations"), ("shape", "shape"),
                       ("expression", "expression")):
        assert rel_err(getattr(g, attr), numeric_grad(f, getattr(p, attr))) < 1e-5, name


def test_equilateral_frame():
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    fr = triangle_frames(Mesh(verts, np.array([[0, 1, 2]])))
    assert np.allclose(fr.rotation[0][:, 1], [0, 0, 1])
    assert np.isclose(fr.scale[0], 1.0)
    assert np.isclose(np.linalg.det(fr.rotation[0]), 1.0)


def test_frames_scale_with_mesh(rng):
    verts = rng.normal(size=(8, 3))
    faces = np.array([rng.choice(8, 3, replace=False) for _ in range(6)])
    a = triangle_frames(Mesh(verts, faces))
    b = triangle_frames(Mesh(2 * verts, faces))
    assert np.allclose(b.scale, 2 * a.scale)
    assert np.allclose(b.rotation, a.rotation)


def test_frames_match_cross_product_oracle(rng):
    verts = rng.normal(size=(10, 3))
    faces = np.array([rng.choice(10, 3, replace=False) for _ in range(8)])
    fr = triangle_frames(Mesh(verts, faces))
    for k, (i, j, l) in enumerate(faces):
        e1, e2 = verts[j] - verts[i], verts[l] - verts[i]
        x = e1 / np.linalg.norm(e1)
        n = np.cross(e1, e2)
        n /= np.linalg.norm(n)
        R = np.stack([x, n, np.cross(x, n)], axis=1)
        assert np.allclose(fr.rotation[k], R, atol=1e-12)
        assert np.allclose(fr.rotation[k].T @ fr.rotation[k], np.eye(3), atol=1e-6)
        mean_edge = (np.linalg.norm(e1) + np.linalg.norm(e2) + np.linalg.norm(verts[l] - verts[j])) / 3
        assert np.isclose(fr.scale[k], mean_edge)


def test_degenerate_triangle_fallback(rng):
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 2], [0, 1, 3]])
    fr = triangle_frames(Mesh(verts, faces))
    assert fr.degenerate.tolist() == [True, False]
    assert np.array_equal(fr.rotation[0], np.eye(3))
    assert fr.scale[0] == pytest.approx(4.0 / 3.0)  # mean edge, floored at 1e-6
    pinned = triangle_frames(Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]])))
    assert pinned.scale[0] == 1e-6
    good = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 0, 1], [0, 1, 0]]), faces)
    prev = triangle_frames(good)
    fr2 = triangle_frames(Mesh(verts, faces), previous=prev)
    assert np.array_equal(fr2.rotation[0], prev.rotation[0])


def test_frames_backward_matches_fd(rng):
    verts = rng.normal(size=(8, 3))
    faces = np.array([rng.choice(8, 3, replace=False) for _ in range(6)])
    WR, Ws, Wc = rng.normal(size=(6, 3, 3)), rng.normal(size=6), rng.normal(size=(6, 3))

    def f():
        fr = triangle_frames(Mesh(verts, faces))
        return float(np.sum(fr.rotation * WR) + fr.scale @ Ws + np.sum(fr.centroid * Wc))

    fr = triangle_frames(Mesh(verts, faces))
    g = triangle_frames_backward(fr, WR, Ws, Wc)
    assert rel_err(g, numeric_grad(f, verts)) < 1e-6
