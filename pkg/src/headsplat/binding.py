"""Gaussians rigged to mesh triangles.

Each Gaussian stores a host triangle, barycentric weights and attributes in
the triangle's local frame.  :func:`to_world` composes them with the current
triangle frames; :func:`to_world_backward` returns gradients for both the
cloud attributes and the mesh vertices.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import quat_to_rotmat, quat_to_rotmat_backward, rotmat_to_quat
from .headmodel import Frames, Mesh, triangle_frames


class BindingError(ValueError):
    pass


def logit(p):
    p = np.asarray(p, float)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    x = np.asarray(x, float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class BoundGaussianCloud:
    triangle_id: np.ndarray  # (G,) int
    barycentric: np.ndarray  # (G, 3)
    local_offset: np.ndarray  # (G, 3), triangle-frame units
    log_scale: np.ndarray  # (G, 3), relative to the triangle scale
    rotation: np.ndarray  # (G, 4) quaternion (w, x, y, z)
    opacity_logit: np.ndarray  # (G,)
    sh_coeffs: np.ndarray  # (G, (k+1)^2, 3)

    def __len__(self):
        return self.triangle_id.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    def copy(self) -> "BoundGaussianCloud":
        return BoundGaussianCloud(*(getattr(self, f).copy() for f in self.__dataclass_fields__))

    def normalize_rotations(self) -> None:
        self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)


@dataclass
class WorldGaussians:
    mean: np.ndarray  # (G, 3)
    rotation: np.ndarray  # (G, 3, 3)
    scale: np.ndarray  # (G, 3)
    opacity_logit: np.ndarray  # (G,)
    sh_coeffs: np.ndarray  # (G, K, 3)
    source: np.ndarray  # (G,) index into the cloud
    cache: dict | None = field(default=None, repr=False)

    def __len__(self):
        return self.mean.shape[0]

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)


@dataclass
class WorldGrads:
    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity_logit: np.ndarray
    sh_coeffs: np.ndarray

    @classmethod
    def zeros_like(cls, w: WorldGaussians) -> "WorldGrads":
        return cls(np.zeros_like(w.mean), np.zeros_like(w.rotation), np.zeros_like(w.scale),
                   np.zeros_like(w.opacity_logit), np.zeros_like(w.sh_coeffs))


@dataclass
class CloudGrads:
    local_offset: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    sh_coeffs: np.ndarray


def init_bindings(mesh: Mesh, per_triangle: int = 1, seed: int = 0, sh_degree: int = 0) -> BoundGaussianCloud:
    """Anchor ``per_triangle`` Gaussians on every face.

    The first Gaussian of a face sits at its centroid; the rest get
    barycentric weights drawn uniformly on the simplex.
    """
    if per_triangle < 1:
        raise BindingError("per_triangle must be >= 1")
    F = mesh.faces.shape[0]
    if F == 0:
        raise BindingError("cannot bind Gaussians to an empty mesh")
    if not 0 <= sh_degree <= 3:
        raise BindingError(f"unsupported SH degree {sh_degree}")
    rng = np.random.default_rng(seed)
    G = F * per_triangle
    tri = np.repeat(np.arange(F), per_triangle)
    bary = np.full((G, 3), 1.0 / 3.0)
    if per_triangle > 1:
        jitter = rng.dirichlet(np.ones(3), size=(F, per_triangle - 1))
        bary.reshape(F, per_triangle, 3)[:, 1:] = jitter
    rot = np.zeros((G, 4))
    rot[:, 0] = 1.0
    return BoundGaussianCloud(
        triangle_id=tri,
        barycentric=bary,
        local_offset=np.zeros((G, 3)),
        log_scale=np.full((G, 3), np.log(0.5)),
        rotation=rot,
        opacity_logit=np.zeros(G),
        sh_coeffs=np.zeros((G, (sh_degree + 1) ** 2, 3)),
    )


def to_world(cloud: BoundGaussianCloud, frames: Frames, mesh: Mesh) -> WorldGaussians:
    tid = cloud.triangle_id
    if tid.size and (tid.min() < 0 or tid.max() >= mesh.faces.shape[0]):
        raise BindingError("triangle_id out of range")
    tri = mesh.vertices[mesh.faces[tid]]  # (G, 3, 3)
    Rf = frames.rotation[tid]
    sf = frames.scale[tid]
    anchor = np.einsum("gk,gkc->gc", cloud.barycentric, tri)
    offset = sf[:, None] * cloud.local_offset
    mean = anchor + np.einsum("gab,gb->ga", Rf, offset)
    Rq = quat_to_rotmat(cloud.rotation)
    rotation = Rf @ Rq
    exp_s = np.exp(cloud.log_scale)
    scale = sf[:, None] * exp_s
    cache = {"Rf": Rf, "sf": sf, "Rq": Rq, "exp_s": exp_s, "cloud": cloud, "frames": frames,
             "faces": mesh.faces, "n_vertices": mesh.vertices.shape[0]}
    return WorldGaussians(mean, rotation, scale, cloud.opacity_logit.copy(), cloud.sh_coeffs,
                          np.arange(len(cloud)), cache)


def to_world_backward(world: WorldGaussians, grads: WorldGrads):
    """Return ``(CloudGrads, d_frame_rotation, d_frame_scale, d_vertices)``.

    Frame gradients still have to be pushed through
    :func:`~headsplat.headmodel.triangle_frames_backward` and added to
    ``d_vertices``.
    """
    c = world.cache
    cloud = c["cloud"]
    Rf, sf, Rq, exp_s = c["Rf"], c["sf"], c["Rq"], c["exp_s"]
    tid = cloud.triangle_id
    F = c["frames"].rotation.shape[0]
    gm = grads.mean
    d_local = sf[:, None] * np.einsum("gab,ga->gb", Rf, gm)
    dRf = np.einsum("ga,gb->gab", gm, sf[:, None] * cloud.local_offset) + grads.rotation @ np.swapaxes(Rq, 1, 2)
    dsf = np.einsum("ga,gab,gb->g", gm, Rf, cloud.local_offset) + np.sum(grads.scale * exp_s, axis=1)
    dRq = np.swapaxes(Rf, 1, 2) @ grads.rotation
    d_quat = quat_to_rotmat_backward(cloud.rotation, dRq)
    d_log_scale = grads.scale * sf[:, None] * exp_s
    d_frame_rot = np.zeros((F, 3, 3))
    np.add.at(d_frame_rot, tid, dRf)
    d_frame_scale = np.zeros(F)
    np.add.at(d_frame_scale, tid, dsf)
    dV = np.zeros((c["n_vertices"], 3))
    corner = c["faces"][tid]  # (G, 3)
    np.add.at(dV, corner, cloud.barycentric[:, :, None] * gm[:, None, :])
    cg = CloudGrads(d_local, d_log_scale, d_quat, grads.opacity_logit.copy(), grads.sh_coeffs.copy())
    return cg, d_frame_rot, d_frame_scale, dV


def apply_residuals(world: WorldGaussians, d_mean, d_scale, d_rot, d_opacity) -> WorldGaussians:
    """Compose per-Gaussian residuals onto world attributes.

    ``mean + d_mean``, ``scale * exp(d_scale)``,
    ``rotation @ R(normalize((1, 0, 0, 0) + d_rot))`` and
    ``opacity_logit + d_opacity``.  Zero residuals are an exact identity.
    """
    G = len(world)
    d_opacity = np.asarray(d_opacity, float).reshape(G)
    for name, arr, shp in (("d_mean", d_mean, (G, 3)), ("d_scale", d_scale, (G, 3)),
                           ("d_rot", d_rot, (G, 4)), ("d_opacity", d_opacity, (G,))):
        arr = np.asarray(arr)
        if arr.shape != shp:
            raise BindingError(f"{name} has shape {arr.shape}, expected {shp}")
        bad = ~np.isfinite(arr.reshape(G, -1)).all(axis=1)
        if bad.any():
            raise BindingError(f"non-finite residual {name} at Gaussian {int(np.flatnonzero(bad)[0])}")
    q = np.asarray(d_rot, float).copy()
    q[:, 0] += 1.0
    Rd = quat_to_rotmat(q)
    exp_ds = np.exp(d_scale)
    cache = {"inner": world, "q": q, "Rd": Rd, "exp_ds": exp_ds}
    return WorldGaussians(world.mean + d_mean, world.rotation @ Rd, world.scale * exp_ds,
                          world.opacity_logit + d_opacity, world.sh_coeffs, world.source, cache)


def apply_residuals_backward(out: WorldGaussians, grads: WorldGrads):
    """Return ``(grads for the input world, (dd_mean, dd_scale, dd_rot, dd_opacity))``."""
    c = out.cache
    inner = c["inner"]
    Rd = c["Rd"]
    g_in = WorldGrads(
        mean=grads.mean,
        rotation=grads.rotation @ np.swapaxes(Rd, 1, 2),
        scale=grads.scale * c["exp_ds"],
        opacity_logit=grads.opacity_logit,
        sh_coeffs=grads.sh_coeffs,
    )
    dRd = np.swapaxes(inner.rotation, 1, 2) @ grads.rotation
    dd_rot = quat_to_rotmat_backward(c["q"], dRd)
    dd_scale = grads.scale * out.scale
    return g_in, (grads.mean.copy(), dd_scale, dd_rot, grads.opacity_logit.copy())


def reset_opacity(cloud: BoundGaussianCloud, value: float) -> BoundGaussianCloud:
    if not 0.0 < value < 1.0:
        raise BindingError(f"opacity reset value {value} outside (0, 1)")
    return replace(cloud, opacity_logit=np.full_like(cloud.opacity_logit, float(logit(value))))


def _closest_point_on_triangle(p, a, b, c):
    """Barycentric weights of the closest point on triangle abc to p (vectorized)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    n = p.shape[0]
    out = np.zeros((n, 3))
    done = np.zeros(n, bool)

    def put(mask, w):
        nonlocal done
        m = mask & ~done
        out[m] = w[m]
        done |= m

    one = np.ones(n)
    zero = np.zeros(n)
    put((d1 <= 0) & (d2 <= 0), np.stack([one, zero, zero], 1))
    put((d3 >= 0) & (d4 <= d3), np.stack([zero, one, zero], 1))
    put((d6 >= 0) & (d5 <= d6), np.stack([zero, zero, one], 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.stack([1 - v, v, zero], 1))
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.stack([1 - w, zero, w], 1))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.stack([zero, 1 - w, w], 1))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        put(np.ones(n, bool), np.stack([1 - v - w, v, w], 1))
    return np.clip(out, 0.0, 1.0)


def reanchor(cloud: BoundGaussianCloud, mesh: Mesh, eps_position: float = 1.0,
             frames: Frames | None = None) -> BoundGaussianCloud:
    """Re-bind Gaussians that drifted beyond ``eps_position`` from their anchor.

    Drift is measured as ``|local_offset|`` in triangle-frame units.  Drifted
    Gaussians move to the face with the nearest centroid, anchored at the
    closest point on that face; their world mean, rotation and scale are
    preserved.
    """
    frames = triangle_frames(mesh) if frames is None else frames
    drift = np.linalg.norm(cloud.local_offset, axis=1) > eps_position
    if not drift.any():
        return cloud.copy()
    world = to_world(cloud, frames, mesh)
    idx = np.flatnonzero(drift)
    p = world.mean[idx]
    d2 = np.sum((p[:, None, :] - frames.centroid[None, :, :]) ** 2, axis=2)
    new_tid = np.argmin(d2, axis=1)
    tri = mesh.vertices[mesh.faces[new_tid]]
    bary = _closest_point_on_triangle(p, tri[:, 0], tri[:, 1], tri[:, 2])
    bary /= bary.sum(axis=1, keepdims=True)
    anchor = np.einsum("gk,gkc->gc", bary, tri)
    Rf = frames.rotation[new_tid]
    sf = frames.scale[new_tid]
    out = cloud.copy()
    out.triangle_id[idx] = new_tid
    out.barycentric[idx] = bary
    out.local_offset[idx] = np.einsum("gba,gb->ga", Rf, p - anchor) / sf[:, None]
    out.rotation[idx] = rotmat_to_quat(np.swapaxes(Rf, 1, 2) @ world.rotation[idx])
    out.log_scale[idx] = np.log(world.scale[idx] / sf[:, None])
    return out
