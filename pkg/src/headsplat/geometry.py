"""Rotation helpers shared by the head model, bindings and projection.

Every function that produces a rotation also has an analytic derivative
counterpart; derivative tensors are laid out as ``d[..., k, a, b]`` =
d R[a, b] / d param[k].
"""
import numpy as np

_SMALL_ANGLE = 1e-6


def skew(v):
    """Cross-product matrix(es) for vectors of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(w):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    A zero vector maps to the exact identity.
    """
    w = np.asarray(w, dtype=float)
    theta2 = np.sum(w * w, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(w)
    R = np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)
    zero = theta2 == 0.0
    if np.any(zero):
        R[zero] = np.eye(3)
    return R


def rodrigues_jacobian(w):
    """Derivative of :func:`rodrigues`, shape (..., 3, 3, 3)."""
    w = np.asarray(w, dtype=float)
    flat = w.reshape(-1, 3)
    R = rodrigues(flat)
    E = np.eye(3)
    out = np.empty((flat.shape[0], 3, 3, 3))
    for n, (v, Rn) in enumerate(zip(flat, R)):
        theta2 = float(v @ v)
        Kv = skew(v)
        for i in range(3):
            Ei = skew(E[i])
            if theta2 < _SMALL_ANGLE ** 2:
                out[n, i] = Ei + 0.5 * (Ei @ Kv + Kv @ Ei)
            else:
                u = np.cross(v, (E - Rn) @ E[i])
                out[n, i] = (v[i] * Kv + skew(u)) @ Rn / theta2
    return out.reshape(w.shape[:-1] + (3, 3, 3))


def quat_to_rotmat(q):
    """Quaternions (..., 4) in (w, x, y, z) order to rotation matrices.

    The input is normalized first so that any non-zero quaternion is valid.
    """
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, dR):
    """Pull a gradient on the rotation matrix back to the raw quaternion."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # normalization: dq = (I - u u^T) du / |q|
    return (du - u * np.sum(u * du, axis=-1, keepdims=True)) / norm


def rotmat_to_quat(R):
    """Rotation matrices to unit quaternions in (w, x, y, z), w >= 0."""
    from scipy.spatial.transform import Rotation

    R = np.asarray(R, dtype=float)
    xyzw = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(R.shape[:-2] + (4,))


def normalize_backward(u, norm, g):
    """Gradient of ``x / |x|`` given the unit result ``u`` and ``|x|``."""
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm
