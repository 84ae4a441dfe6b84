"""Dense linear-algebra kernel.

Every factorization used by the estimators goes through this module so that
rank cutoffs and sign conventions are applied consistently.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DimensionError, InvalidInputError, NotPSDError

__all__ = [
    "SymEig",
    "as_matrix",
    "cholesky",
    "eig_sym",
    "numeric_rank",
    "pinv",
    "sqrt_psd",
]

_EPS = np.finfo(np.float64).eps


class SymEig(NamedTuple):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    values: np.ndarray
    vectors: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float array (vectors become columns)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def pinv(a, rtol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values at or below ``rtol * sigma_max`` are treated as zero.
    The default cutoff is ``max(rows, cols) * eps``.
    """
    a = as_matrix(a)
    m, n = a.shape
    if a.size == 0:
        return np.zeros((n, m))
    if rtol is None:
        rtol = max(m, n) * _EPS
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((n, m))
    # reciprocals that would overflow are treated as zero singular values
    keep = (s > rtol * s[0]) & (s > 1.0 / np.finfo(np.float64).max)
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def eig_sym(a) -> SymEig:
    """Symmetric eigendecomposition with descending eigenvalues.

    The input is symmetrized as ``(a + a.T) / 2`` first. Each eigenvector is
    signed so that its largest-magnitude entry is positive.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"eig_sym needs a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    values, vectors = np.linalg.eigh(sym)
    values = values[::-1].copy()
    vectors = vectors[:, ::-1].copy()
    if vectors.size:
        pivot = np.argmax(np.abs(vectors), axis=0)
        signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
        signs[signs == 0] = 1.0
        vectors *= signs
    return SymEig(values, vectors)


def sqrt_psd(a) -> np.ndarray:
    """Symmetric PSD square root ``B`` with ``B @ B == a``."""
    values, vectors = eig_sym(a)
    if values.size == 0:
        return np.zeros_like(as_matrix(a))
    scale = max(abs(values[0]), abs(values[-1]))
    if values[-1] < -1e-8 * scale:
        raise NotPSDError(f"matrix has eigenvalue {values[-1]:.3e} < 0")
    root = np.sqrt(np.clip(values, 0.0, None))
    out = (vectors * root) @ vectors.T
    return 0.5 * (out + out.T)


def cholesky(a) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive-definite matrix."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"cholesky needs a square matrix, got {a.shape}")
    try:
        return np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError as exc:
        raise NotPSDError("matrix is not positive definite") from exc


def numeric_rank(a, rtol: float = 1e-8) -> int:
    """Number of singular values above ``rtol * sigma_max``."""
    a = as_matrix(a)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))
