"""Small dense linear-algebra helpers shared by every other module.

Matrices are 2-D float ``numpy`` arrays and vectors are 1-D arrays. The
helpers here validate shapes and finiteness and pin down the rank threshold
used for pseudo-inverses so that the rest of the package agrees on it.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

# Singular values below this fraction of sigma_max are treated as zero.
PINV_RCOND = 1e-9
SYMMETRY_TOL = 1e-12


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NotSymmetricError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce ``m`` to a finite 2-D float array."""
    arr = np.array(m, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def mat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def spectral_norm(m) -> float:
    """Induced 2-norm (largest singular value)."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False)[0])


def sigma_min(m) -> float:
    """Smallest of the min(rows, cols) singular values."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False)[-1])


def pinv(m) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with the package-wide truncation rule.

    Works on a single matrix or on a stack of shape (..., rows, cols).
    """
    m = np.asarray(m, dtype=float)
    return np.linalg.pinv(m, rcond=PINV_RCOND)


def sym_eig_bounds(m) -> Tuple[float, float]:
    """Return (lambda_min, lambda_max) of a symmetric matrix."""
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > SYMMETRY_TOL * scale:
        raise NotSymmetricError("matrix is not symmetric")
    eigs = np.linalg.eigvalsh(m)
    return float(eigs[0]), float(eigs[-1])


def logdet_spd(m) -> float:
    """Log-determinant of an SPD matrix via its Cholesky factor."""
    m = as_matrix(m)
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("matrix is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def matrix_power(m, k: int) -> np.ndarray:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"power of non-square matrix {m.shape}")
    return np.linalg.matrix_power(m, k)


def batch_spectral_norm(stack: np.ndarray) -> np.ndarray:
    """Spectral norms of a stack of matrices, shape (N, rows, cols) -> (N,)."""
    return np.linalg.svd(np.asarray(stack, dtype=float), compute_uv=False)[..., 0]


def batch_sigma_min(stack: np.ndarray) -> np.ndarray:
    return np.linalg.svd(np.asarray(stack, dtype=float), compute_uv=False)[..., -1]
