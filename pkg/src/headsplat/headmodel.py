"""Parametric blendshape head model with linear blend skinning.

Vertices are produced in three stages: linear shape/expression blendshapes
on top of the template, linear blend skinning over a small joint tree, and a
global rigid motion.  :func:`evaluate` keeps a cache so that
:func:`evaluate_backward` can return gradients for every parameter.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import rodrigues, rodrigues_jacobian

MAGIC = b"GHM1"
DEGENERATE_AREA = 1e-12
SCALE_FLOOR = 1e-6


class HeadModelError(ValueError):
    """Raised when a head model or its parameters are malformed."""


@dataclass(frozen=True, eq=False)
class HeadModel:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (V, 3, n_shape)
    expression_basis: np.ndarray  # (V, 3, n_expr)
    vertex_offsets: np.ndarray  # (V, 3)
    skinning_weights: np.ndarray  # (V, J)
    joint_parents: np.ndarray  # (J,) int, -1 for the root
    joint_rest_positions: np.ndarray  # (J, 3)
    vertex_colors: np.ndarray  # (V, 3)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def joint_count(self) -> int:
        return self.joint_parents.shape[0]

    def dims(self) -> dict:
        return {"V": self.n_vertices, "F": self.n_faces, "n_shape": self.n_shape,
                "n_expr": self.n_expr, "J": self.joint_count}

    def validate(self) -> "HeadModel":
        V = self.template_vertices.shape[0]
        J = self.joint_parents.shape[0]
        expect = {
            "template_vertices": (V, 3),
            "faces": (None, 3),
            "shape_basis": (V, 3, None),
            "expression_basis": (V, 3, None),
            "vertex_offsets": (V, 3),
            "skinning_weights": (V, J),
            "joint_rest_positions": (J, 3),
            "vertex_colors": (V, 3),
        }
        for name, shp in expect.items():
            arr = getattr(self, name)
            if arr.ndim != len(shp) or any(s is not None and a != s for a, s in zip(arr.shape, shp)):
                raise HeadModelError(f"{name} has shape {arr.shape}, expected {shp}")
            if not np.all(np.isfinite(arr)):
                raise HeadModelError(f"{name} contains non-finite values")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise HeadModelError("faces reference vertices out of range")
        w = self.skinning_weights
        bad = np.flatnonzero((w < 0).any(axis=1) | (np.abs(w.sum(axis=1) - 1.0) > 1e-6))
        if bad.size:
            raise HeadModelError(f"skinning_weights row {bad[0]} not convex")
        for j, p in enumerate(self.joint_parents):
            if j == 0 and p != -1:
                raise HeadModelError("joint_parents: joint 0 must be the root (-1)")
            if j > 0 and not 0 <= p < j:
                raise HeadModelError(f"joint_parents: joint {j} has parent {p}; parents must precede children")
        return self


@dataclass
class HeadParams:
    rigid: np.ndarray  # (6,) axis-angle rotation then translation
    joint_rotations: np.ndarray  # (J, 3)
    shape: np.ndarray  # (n_shape,)
    expression: np.ndarray  # (n_expr,)

    @classmethod
    def zeros(cls, model: HeadModel) -> "HeadParams":
        return cls(np.zeros(6), np.zeros((model.joint_count, 3)),
                   np.zeros(model.n_shape), np.zeros(model.n_expr))

    def copy(self) -> "HeadParams":
        return HeadParams(self.rigid.copy(), self.joint_rotations.copy(),
                          self.shape.copy(), self.expression.copy())

    def check(self, model: HeadModel) -> None:
        shapes = {"rigid": (6,), "joint_rotations": (model.joint_count, 3),
                  "shape": (model.n_shape,), "expression": (model.n_expr,)}
        for name, shp in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != shp:
                raise HeadModelError(f"HeadParams.{name} has shape {arr.shape}, expected {shp}")
            if not np.all(np.isfinite(arr)):
                raise HeadModelError(f"HeadParams.{name} contains non-finite values")

    def to_dict(self) -> dict:
        return {"rigid": self.rigid.tolist(), "joint_rotations": self.joint_rotations.tolist(),
                "shape": self.shape.tolist(), "expression": self.expression.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadParams":
        return cls(np.asarray(d["rigid"], float), np.asarray(d["joint_rotations"], float).reshape(-1, 3),
                   np.asarray(d["shape"], float), np.asarray(d["expression"], float))


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    cache: dict | None = field(default=None, repr=False)


@dataclass
class HeadParamGrads:
    rigid: np.ndarray
    joint_rotations: np.ndarray
    shape: np.ndarray
    expression: np.ndarray
    vertex_offsets: np.ndarray


# ---------------------------------------------------------------------------
# asset IO

_FIELDS = ["template_vertices", "faces", "shape_basis", "expression_basis", "vertex_offsets",
           "skinning_weights", "joint_parents", "joint_rest_positions", "vertex_colors"]


def _field_shapes(V, F, S, E, J):
    return {"template_vertices": (V, 3), "faces": (F, 3), "shape_basis": (V, 3, S),
            "expression_basis": (V, 3, E), "vertex_offsets": (V, 3), "skinning_weights": (V, J),
            "joint_parents": (J,), "joint_rest_positions": (J, 3), "vertex_colors": (V, 3)}


def save_head_model(model: HeadModel, path) -> None:
    """Write the little-endian ``GHM1`` asset plus a JSON sidecar of dims."""
    path = Path(path)
    d = model.dims()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", d["V"], d["F"], d["n_shape"], d["n_expr"], d["J"]))
        for name in _FIELDS:
            arr = getattr(model, name)
            if name == "faces":
                fh.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())
            elif name == "joint_parents":
                fh.write(np.ascontiguousarray(arr, dtype="<i4").tobytes())
            else:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(d, indent=2))


def load_head_model(path) -> HeadModel:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise HeadModelError("malformed header: bad magic")
    V, F, S, E, J = struct.unpack("<5I", raw[4:24])
    shapes = _field_shapes(V, F, S, E, J)
    offset = 24
    arrays = {}
    for name in _FIELDS:
        shp = shapes[name]
        dtype = {"faces": "<u4", "joint_parents": "<i4"}.get(name, "<f4")
        nbytes = int(np.prod(shp)) * 4
        if offset + nbytes > len(raw):
            raise HeadModelError(f"dimension mismatch: file truncated in field {name}")
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shp)), offset=offset).reshape(shp)
        arrays[name] = arr.astype(np.int64) if dtype != "<f4" else arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise HeadModelError(f"dimension mismatch: {len(raw) - offset} trailing bytes")
    return HeadModel(**arrays).validate()


# ---------------------------------------------------------------------------
# evaluation


def _kinematics(model: HeadModel, joint_rotations):
    """World rotations and displacement offsets of every joint.

    Skinning uses the displacement form ``v + sum_j w_j ((A_j - I) v + b_j)``,
    which is exact at identity rotations.
    """
    J = model.joint_count
    R_local = rodrigues(joint_rotations)
    A = np.empty((J, 3, 3))
    b = np.empty((J, 3))
    rest = model.joint_rest_positions
    eye = np.eye(3)
    for j in range(J):
        p = model.joint_parents[j]
        if p < 0:
            A[j] = R_local[j]
            b[j] = (eye - R_local[j]) @ rest[j]
        else:
            A[j] = A[p] @ R_local[j]
            b[j] = b[p] + A[p] @ ((eye - R_local[j]) @ rest[j])
    return R_local, A, b


def evaluate(model: HeadModel, params: HeadParams) -> Mesh:
    params.check(model)
    v0 = (model.template_vertices + model.vertex_offsets
          + model.shape_basis @ np.asarray(params.shape, float)
          + model.expression_basis @ np.asarray(params.expression, float))
    R_local, A, b = _kinematics(model, params.joint_rotations)
    W = model.skinning_weights
    disp = np.einsum("vj,jab,vb->va", W, A - np.eye(3), v0) + W @ b
    v1 = v0 + disp
    Rg = rodrigues(params.rigid[:3])
    verts = v1 @ Rg.T + params.rigid[3:]
    if not np.all(np.isfinite(verts)):
        raise HeadModelError("evaluate produced non-finite vertices")
    cache = {"v0": v0, "v1": v1, "R_local": R_local, "A": A, "b": b, "Rg": Rg,
             "params": params.copy()}
    return Mesh(verts, model.faces, cache)


def evaluate_backward(model: HeadModel, mesh: Mesh, grad_vertices) -> HeadParamGrads:
    """Gradients of a scalar loss w.r.t. every head parameter."""
    c = mesh.cache
    if c is None:
        raise HeadModelError("mesh carries no evaluation cache")
    g = np.asarray(grad_vertices, float)
    params = c["params"]
    Rg = c["Rg"]
    d_rigid = np.zeros(6)
    d_rigid[3:] = g.sum(axis=0)
    dRg = g.T @ c["v1"]
    d_rigid[:3] = np.einsum("kab,ab->k", rodrigues_jacobian(params.rigid[:3]), dRg)
    g1 = g @ Rg

    W = model.skinning_weights
    A, b, R_local = c["A"], c["b"], c["R_local"]
    v0 = c["v0"]
    g0 = g1 + np.einsum("vj,jab,va->vb", W, A - np.eye(3), g1)
    dA = np.einsum("vj,va,vb->jab", W, g1, v0)
    db = W.T @ g1
    rest = model.joint_rest_positions
    eye = np.eye(3)
    dR = np.zeros_like(R_local)
    for j in range(model.joint_count - 1, -1, -1):
        p = model.joint_parents[j]
        if p < 0:
            dR[j] = dA[j] - np.outer(db[j], rest[j])
        else:
            dA[p] += dA[j] @ R_local[j].T + np.outer(db[j], (eye - R_local[j]) @ rest[j])
            dR[j] = A[p].T @ dA[j] - np.outer(A[p].T @ db[j], rest[j])
            db[p] += db[j]
    d_joints = np.einsum("jkab,jab->jk", rodrigues_jacobian(params.joint_rotations), dR)
    d_shape = np.einsum("vck,vc->k", model.shape_basis, g0)
    d_expr = np.einsum("vck,vc->k", model.expression_basis, g0)
    return HeadParamGrads(d_rigid, d_joints, d_shape, d_expr, g0)


# ---------------------------------------------------------------------------
# triangle frames


@dataclass
class Frames:
    centroid: np.ndarray  # (F, 3)
    rotation: np.ndarray  # (F, 3, 3) columns: edge dir, normal, edge x normal
    scale: np.ndarray  # (F,)
    degenerate: np.ndarray  # (F,) bool
    cache: dict | None = field(default=None, repr=False)


def triangle_frames(mesh: Mesh, previous: Frames | None = None) -> Frames:
    """Local frame per triangle used to anchor Gaussians.

    Faces with area below ``1e-12`` reuse the frame from ``previous`` when
    given, otherwise an identity frame with scale floored at ``1e-6``; they
    are flagged in ``degenerate`` and receive no gradient.
    """
    V = mesh.vertices
    tri = V[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = b - a
    e2 = c - a
    n = np.cross(e1, e2)
    len_e1 = np.linalg.norm(e1, axis=1)
    len_n = np.linalg.norm(n, axis=1)
    degenerate = 0.5 * len_n < DEGENERATE_AREA
    safe_e1 = np.where(len_e1 > 0, len_e1, 1.0)
    safe_n = np.where(len_n > 0, len_n, 1.0)
    x = e1 / safe_e1[:, None]
    z = n / safe_n[:, None]
    y = np.cross(x, z)
    R = np.stack([x, z, y], axis=2)
    edges = np.stack([b - a, c - b, a - c], axis=1)
    edge_len = np.linalg.norm(edges, axis=2)
    scale = edge_len.mean(axis=1)
    centroid = tri.mean(axis=1)
    if np.any(degenerate):
        if previous is not None:
            R[degenerate] = previous.rotation[degenerate]
            scale[degenerate] = previous.scale[degenerate]
        else:
            R[degenerate] = np.eye(3)
            scale[degenerate] = np.maximum(scale[degenerate], SCALE_FLOOR)
    cache = {"x": x, "z": z, "len_e1": safe_e1, "len_n": safe_n, "e1": e1, "e2": e2,
             "edges": edges, "edge_len": np.where(edge_len > 0, edge_len, 1.0), "faces": mesh.faces,
             "n_vertices": V.shape[0]}
    return Frames(centroid, R, scale, degenerate, cache)


def triangle_frames_backward(frames: Frames, d_rotation=None, d_scale=None, d_centroid=None):
    """Gradient w.r.t. mesh vertices, shape (V, 3)."""
    c = frames.cache
    faces = c["faces"]
    Fn = faces.shape[0]
    dtri = np.zeros((Fn, 3, 3))
    live = ~frames.degenerate
    if d_rotation is not None:
        x, z = c["x"], c["z"]
        g0, g1, g2 = d_rotation[:, :, 0], d_rotation[:, :, 1], d_rotation[:, :, 2]
        dx = g0 + np.cross(z, g2)
        dz = g1 + np.cross(g2, x)
        de1 = (dx - x * np.sum(x * dx, axis=1, keepdims=True)) / c["len_e1"][:, None]
        dn = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / c["len_n"][:, None]
        de1 = de1 + np.cross(c["e2"], dn)
        de2 = np.cross(dn, c["e1"])
        de1[~live] = 0
        de2[~live] = 0
        dtri[:, 0] -= de1 + de2
        dtri[:, 1] += de1
        dtri[:, 2] += de2
    if d_scale is not None:
        ds = np.where(live, d_scale, 0.0)[:, None, None] / 3.0
        dedge = ds * c["edges"] / c["edge_len"][:, :, None]
        # edges: b-a, c-b, a-c
        dtri[:, 1] += dedge[:, 0] - dedge[:, 1]
        dtri[:, 2] += dedge[:, 1] - dedge[:, 2]
        dtri[:, 0] += dedge[:, 2] - dedge[:, 0]
    if d_centroid is not None:
        dtri += d_centroid[:, None, :] / 3.0
    dV = np.zeros((c["n_vertices"], 3))
    np.add.at(dV, faces, dtri)
    return dV
