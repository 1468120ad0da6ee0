"""Real spherical harmonics up to degree 3 (the usual splatting convention)."""
import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


class SHError(ValueError):
    pass


def sh_basis(dirs, degree):
    """Basis values (N, (degree+1)^2) and their derivative w.r.t. dirs (N, K, 3)."""
    if not 0 <= degree <= 3:
        raise SHError(f"unsupported SH degree {degree}")
    d = np.asarray(dirs, float).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    K = (degree + 1) ** 2
    B = np.zeros((n, K))
    D = np.zeros((n, K, 3))
    B[:, 0] = C0
    if degree >= 1:
        B[:, 1] = -C1 * y
        B[:, 2] = C1 * z
        B[:, 3] = -C1 * x
        D[:, 1, 1] = -C1
        D[:, 2, 2] = C1
        D[:, 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = C2[0] * x * y
        B[:, 5] = C2[1] * y * z
        B[:, 6] = C2[2] * (2 * zz - xx - yy)
        B[:, 7] = C2[3] * x * z
        B[:, 8] = C2[4] * (xx - yy)
        D[:, 4] = C2[0] * np.stack([y, x, 0 * x], 1)
        D[:, 5] = C2[1] * np.stack([0 * x, z, y], 1)
        D[:, 6] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], 1)
        D[:, 7] = C2[3] * np.stack([z, 0 * x, x], 1)
        D[:, 8] = C2[4] * np.stack([2 * x, -2 * y, 0 * x], 1)
    if degree >= 3:
        B[:, 9] = C3[0] * y * (3 * xx - yy)
        B[:, 10] = C3[1] * x * y * z
        B[:, 11] = C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = C3[5] * z * (xx - yy)
        B[:, 15] = C3[6] * x * (xx - 3 * yy)
        zero = 0 * x
        D[:, 9] = C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], 1)
        D[:, 10] = C3[1] * np.stack([y * z, x * z, x * y], 1)
        D[:, 11] = C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], 1)
        D[:, 12] = C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], 1)
        D[:, 13] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], 1)
        D[:, 14] = C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], 1)
        D[:, 15] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], 1)
    return B, D


def eval_sh(coeffs, view_dir):
    """RGB from SH coefficients ``(..., K, 3)`` seen along unit ``view_dir``.

    ``rgb = max(sum_k c_k Y_k(dir) + 0.5, 0)``.
    """
    coeffs = np.asarray(coeffs, float)
    K = coeffs.shape[-2]
    degree = int(round(np.sqrt(K))) - 1
    if (degree + 1) ** 2 != K:
        raise SHError(f"{K} coefficients do not form a full SH band")
    B, _ = sh_basis(view_dir, degree)
    flat = coeffs.reshape(-1, K, 3)
    if B.shape[0] == 1 and flat.shape[0] > 1:
        B = np.broadcast_to(B, (flat.shape[0], K))
    rgb = np.einsum("nk,nkc->nc", B, flat) + 0.5
    return np.maximum(rgb, 0.0).reshape(coeffs.shape[:-2] + (3,))
