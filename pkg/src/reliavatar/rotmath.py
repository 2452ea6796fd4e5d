"""6D rotation representation and rotation-matrix helpers.

The 6D layout is column-major everywhere in this package: the first three
numbers are the first matrix column, the next three the second column.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Tensor

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
DEGENERATE_TOL = 1e-8


class DegenerateRotationError(ValueError):
    """A 6D vector whose columns are (near) zero or parallel."""


def _gram_schmidt(r: np.ndarray):
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERATE_TOL):
        raise DegenerateRotationError("6D rotation has a zero first column")
    b1 = a1 / n1
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n2 <= DEGENERATE_TOL):
        raise DegenerateRotationError("6D rotation has parallel or zero columns")
    b2 = u / n2
    b3 = np.cross(b1, b2)
    return b1, b2, b3, n1, n2, a2


def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt a (..., 6) array into (..., 3, 3) rotation matrices."""
    r = np.asarray(r)
    if not np.issubdtype(r.dtype, np.floating):
        r = r.astype(float)
    if r.shape[-1] != 6:
        raise ValueError(f"expected trailing axis of 6, got shape {r.shape}")
    b1, b2, b3, *_ = _gram_schmidt(r)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m) -> np.ndarray:
    m = np.asarray(m)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got shape {m.shape}")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rotation_velocity(r_prev, r_cur) -> np.ndarray:
    """6D of ``R(r_prev)^T R(r_cur)``: the rotation taking the previous frame to the current."""
    rp = rot6d_to_matrix(r_prev)
    rc = rot6d_to_matrix(r_cur)
    return matrix_to_rot6d(np.swapaxes(rp, -1, -2) @ rc)


def geodesic_angle_deg(r1, r2) -> np.ndarray:
    r1, r2 = np.asarray(r1), np.asarray(r2)
    tr = np.einsum("...ij,...ij->...", r1, r2)  # trace(R1^T R2)
    return np.degrees(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def axis_angle_to_matrix(axis, angle) -> np.ndarray:
    """Rodrigues' formula; ``axis`` (..., 3) need not be unit length, ``angle`` in radians."""
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    k = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([
        np.stack([zero, -kz, ky], -1),
        np.stack([kz, zero, -kx], -1),
        np.stack([-ky, kx, zero], -1),
    ], -2)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s * K + (1.0 - c) * (K @ K)


def is_rotation(m, tol: float = 1e-6) -> bool:
    m = np.asarray(m)
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(m, -1, -2) @ m - eye).max() <= tol
    return bool(ortho and np.abs(np.linalg.det(m) - 1.0).max() <= tol)


# --------------------------------------------------------------------------
# differentiable versions
# --------------------------------------------------------------------------

def gram_schmidt(r: Tensor) -> Tensor:
    """Differentiable :func:`rot6d_to_matrix` on a (..., 6) tensor."""
    b1, b2, b3, n1, n2, a2 = _gram_schmidt(r.data)
    out = nc._new(np.stack([b1, b2, b3], axis=-1))

    def back(g):
        gb1 = g[..., :, 0] + np.cross(b2, g[..., :, 2])
        gb2 = g[..., :, 1] + np.cross(g[..., :, 2], b1)
        gu = (gb2 - b2 * np.sum(b2 * gb2, -1, keepdims=True)) / n2
        s = np.sum(b1 * a2, -1, keepdims=True)
        gub = np.sum(b1 * gu, -1, keepdims=True)
        ga2 = gu - b1 * gub
        gb1 = gb1 - s * gu - gub * a2
        ga1 = (gb1 - b1 * np.sum(b1 * gb1, -1, keepdims=True)) / n1
        return (np.concatenate([ga1, ga2], axis=-1),)

    nc.record("gram_schmidt", (r,), out, back)
    return out


def to_rot6d(m: Tensor) -> Tensor:
    """Differentiable :func:`matrix_to_rot6d` on a (..., 3, 3) tensor."""
    out = nc._new(matrix_to_rot6d(m.data))
    shape, dtype = m.shape, m.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., :, 0] = g[..., 0:3]
        full[..., :, 1] = g[..., 3:6]
        return (full,)

    nc.record("to_rot6d", (m,), out, back)
    return out


def relative_rotation(r_prev: Tensor, r_cur: Tensor) -> Tensor:
    """``R_prev^T R_cur`` for batches of (..., 3, 3) matrix tensors."""
    return nc.matmul(nc.swap_last(r_prev), r_cur)
