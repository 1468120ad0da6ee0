"""Finite-difference oracles and random fixtures shared by the test suites."""
import numpy as np

from .headmodel import HeadModel


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric, floor=1e-8):
    """Max-abs difference relative to the larger gradient magnitude."""
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def random_head_model(rng, V=12, F=10, n_shape=3, n_expr=4, J=5):
    """Small random but valid head model (faces are random, not a manifold)."""
    verts = rng.normal(size=(V, 3))
    faces = np.array([rng.choice(V, 3, replace=False) for _ in range(F)])
    W = rng.random((V, J)) + 0.05
    W /= W.sum(axis=1, keepdims=True)
    parents = np.array([-1] + [int(rng.integers(0, j)) for j in range(1, J)])
    return HeadModel(
        template_vertices=verts,
        faces=faces,
        shape_basis=0.1 * rng.normal(size=(V, 3, n_shape)),
        expression_basis=0.1 * rng.normal(size=(V, 3, n_expr)),
        vertex_offsets=0.01 * rng.normal(size=(V, 3)),
        skinning_weights=W,
        joint_parents=parents,
        joint_rest_positions=rng.normal(size=(J, 3)),
        vertex_colors=rng.random((V, 3)),
    ).validate()
