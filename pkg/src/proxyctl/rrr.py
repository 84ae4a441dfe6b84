"""Reduced-rank regression of the proxy outcomes on (Z, X) after partialling.

Orientation: coefficient matrices ``m`` are ``d_V x (d_Z + d_X)`` so that the
fitted values are ``zx_hat @ m.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError
from .numerics import as_matrix, eig_sym, pinv
from .partialling import DataMatrices, fit_residualizers

__all__ = [
    "RrrFit",
    "compute_q",
    "cv_lambda",
    "default_grid",
    "fold_assignments",
    "m_fixed_rank",
    "objective",
    "rrr_fit",
    "select_rank",
]

ZERO_CUTOFF = 1e-10


@dataclass(frozen=True)
class RrrFit:
    omega: np.ndarray
    q: np.ndarray
    q_eigs: np.ndarray
    e_vectors: np.ndarray
    rank: int
    m_hat: np.ndarray
    m_full: np.ndarray
    lam: float | None = None


def _check_rows(v_hat, zx_hat):
    v = as_matrix(v_hat, "v_hat")
    zx = as_matrix(zx_hat, "zx_hat")
    if v.shape[0] != zx.shape[0]:
        raise DimensionError(f"row mismatch: v_hat {v.shape[0]}, zx_hat {zx.shape[0]}")
    return v, zx


def compute_q(v_hat, zx_hat) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(omega, q)`` with ``omega = ZX'ZX`` and ``q = V'ZX omega^+ ZX'V``."""
    v, zx = _check_rows(v_hat, zx_hat)
    omega = zx.T @ zx
    cross = zx.T @ v
    q = cross.T @ pinv(omega) @ cross
    return omega, 0.5 * (q + q.T)


def _pieces(v, zx):
    omega = zx.T @ zx
    cross = zx.T @ v
    m_full_t = pinv(omega) @ cross  # (d_Z + d_X) x d_V
    q = cross.T @ m_full_t
    q = 0.5 * (q + q.T)
    eig = eig_sym(q)
    return omega, q, eig, m_full_t.T


def _project(m_full, vectors, r):
    e = vectors[:, :r]
    return e @ (e.T @ m_full)


def m_fixed_rank(v_hat, zx_hat, r: int) -> np.ndarray:
    """Closed-form minimizer of ``||V - ZX m'||_F^2`` over rank ``<= r``."""
    v, zx = _check_rows(v_hat, zx_hat)
    d_v = v.shape[1]
    if r < 0 or r > d_v:
        raise InvalidInputError(f"rank must lie in [0, {d_v}], got {r}")
    _, _, eig, m_full = _pieces(v, zx)
    return _project(m_full, eig.vectors, r)


def objective(m, v_hat, zx_hat) -> float:
    """Squared Frobenius residual ``||V - ZX m'||_F^2``."""
    v, zx = _check_rows(v_hat, zx_hat)
    m = as_matrix(m, "m")
    if m.shape != (v.shape[1], zx.shape[1]):
        raise DimensionError(f"m must be {(v.shape[1], zx.shape[1])}, got {m.shape}")
    return float(np.sum((v - zx @ m.T) ** 2))


def select_rank(q_eigs, lam: float) -> int:
    """Count eigenvalues at or above ``lam``; numerically-zero ones never count."""
    eigs = np.asarray(q_eigs, dtype=np.float64)
    if eigs.size == 0:
        return 0
    top = eigs[0]
    positive = eigs > ZERO_CUTOFF * top if top > 0 else np.zeros(eigs.shape, dtype=bool)
    return int(np.sum((eigs >= lam) & positive))


def rrr_fit(v_hat, zx_hat, *, rank: int | None = None, lam: float | None = None) -> RrrFit:
    """Fit at a fixed ``rank`` or at the rank selected by threshold ``lam``."""
    if (rank is None) == (lam is None):
        raise InvalidInputError("give exactly one of rank or lam")
    v, zx = _check_rows(v_hat, zx_hat)
    omega, q, eig, m_full = _pieces(v, zx)
    d_v = v.shape[1]
    if rank is None:
        rank = select_rank(eig.values, lam)
    elif rank < 0 or rank > d_v:
        raise InvalidInputError(f"rank must lie in [0, {d_v}], got {rank}")
    m_hat = _project(m_full, eig.vectors, rank)
    return RrrFit(omega, q, eig.values, eig.vectors, rank, m_hat, m_full, lam)


def fold_assignments(n: int, folds: int, seed: int) -> np.ndarray:
    """Seeded shuffle followed by contiguous blocks; fold ids 0..folds-1."""
    if folds < 2:
        raise InvalidInputError(f"need at least 2 folds, got {folds}")
    if n < folds:
        raise InvalidInputError(f"cannot split {n} rows into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assign = np.empty(n, dtype=np.int64)
    assign[perm] = (np.arange(n) * folds) // n
    return assign


def default_grid(q_eigs) -> np.ndarray:
    """Midpoints between consecutive eigenvalues plus both outer brackets."""
    eigs = np.sort(np.asarray(q_eigs, dtype=np.float64))[::-1]
    top = eigs[0] if eigs.size else 0.0
    if top <= 0:
        return np.array([1.0])
    positive = eigs[eigs > ZERO_CUTOFF * top]
    pts = list(0.5 * (eigs[:-1] + eigs[1:]))
    pts += [0.5 * positive[-1], 2.0 * top]
    return np.unique(np.array(pts))


def _fold_scores(data, train, test, mode, penalties, seed):
    """Held-out squared error for every rank 0..d_V from one training fold."""
    fits = fit_residualizers(data, train, mode, penalties, seed, include_check=False)
    tr = fits.apply(data, train)
    te = fits.apply(data, test)
    _, _, eig, m_full = _pieces(tr.hat["v"], tr.zx_hat)
    rotated_v = te.hat["v"] @ eig.vectors
    rotated_fit = (te.zx_hat @ m_full.T) @ eig.vectors
    gain = np.sum(rotated_v**2, axis=0) - np.sum((rotated_v - rotated_fit) ** 2, axis=0)
    by_rank = np.sum(rotated_v**2) - np.concatenate([[0.0], np.cumsum(gain)])
    return eig.values, by_rank


def cv_lambda(
    data: DataMatrices,
    folds: int = 5,
    grid=None,
    *,
    seed: int = 0,
    mode: str = "ols",
    penalties: dict[str, float] | None = None,
    assignments=None,
) -> tuple[float, list[tuple[float, float]]]:
    """Cross-validate the eigenvalue threshold.

    Partialling is re-fitted on each training fold, the held-out rows are
    residualized with the training coefficients, and held-out squared error of
    the proxy-outcome fit is summed over folds. Ties go to the larger threshold.
    """
    if folds < 2:
        raise InvalidInputError(f"need at least 2 folds, got {folds}")
    if data.n < 2 * folds:
        raise InvalidInputError(f"need n >= 2 * folds, got n={data.n}, folds={folds}")
    if grid is None:
        full = fit_residualizers(data, None, mode, penalties, seed, include_check=False).apply(data)
        grid = default_grid(_pieces(full.hat["v"], full.zx_hat)[2].values)
    grid = np.sort(np.asarray(grid, dtype=np.float64).ravel())
    if grid.size == 0:
        raise InvalidInputError("lambda grid is empty")
    assign = fold_assignments(data.n, folds, seed) if assignments is None else np.asarray(assignments)
    scores = np.zeros(grid.size)
    for j in np.unique(assign):
        eigs, by_rank = _fold_scores(data, assign != j, assign == j, mode, penalties, seed)
        ranks = [select_rank(eigs, lam) for lam in grid]
        scores += by_rank[ranks]
    best = scores.min()
    pick = np.flatnonzero(scores <= best)[-1]
    return float(grid[pick]), [(float(g), float(s)) for g, s in zip(grid, scores)]
