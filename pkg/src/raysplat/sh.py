"""Real spherical-harmonics basis up to degree 3, with its Jacobian.

Band ordering and signs follow the common Gaussian-splatting layout, so
coefficient files are interchangeable with that ecosystem.
"""
from __future__ import annotations

import numpy as np

MAX_DEGREE = 3

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# SH color offset: rgb = 0.5 + basis . coeffs
COLOR_OFFSET = 0.5


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values (..., (degree+1)^2) at directions (..., 3)."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d (x, y, z), shape (..., (degree+1)^2, 3).

    Derivatives treat x, y, z as independent; callers chain through the
    normalization of the direction vector themselves.
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, zero - C1, zero), (zero, zero, zero + C1), (zero - C1, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
            (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
            (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(sh: np.ndarray, direction: np.ndarray, degree: int | None = None) -> np.ndarray:
    """RGB color for SH coefficients ``sh`` ((deg+1)^2, 3) seen along ``direction``.

    Returns ``max(0.5 + basis . sh, 0)`` per channel.
    """
    sh = np.asarray(sh, dtype=np.float64)
    if degree is None:
        degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    n = num_coeffs(degree)
    basis = sh_basis(np.asarray(direction, dtype=np.float64), degree)
    rgb = np.einsum("...k,...kc->...c", basis, sh[..., :n, :]) + COLOR_OFFSET
    return np.maximum(rgb, 0.0)


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient reproducing ``rgb`` from every direction."""
    return (np.asarray(rgb, dtype=np.float64) - COLOR_OFFSET) / C0
