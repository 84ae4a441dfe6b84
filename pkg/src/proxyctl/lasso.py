"""L1-penalized least squares by cyclic coordinate descent.

The objective is the sum-of-squares form

    ||y - X w||^2 + penalty * sum_{j penalized} |w_j|

Unpenalized columns are profiled out exactly by least squares before the
coordinate descent runs on the remaining columns. Penalized columns can be
scaled to unit standard deviation, in which case the penalty acts on the
standardized coefficients and the result is mapped back to the original scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError
from .numerics import as_matrix, pinv

__all__ = ["LassoFit", "constant_columns", "lasso", "lasso_path_max", "soft_threshold"]

TOL = 1e-8
MAX_SWEEPS = 10_000


@dataclass(frozen=True)
class LassoFit:
    coef: np.ndarray
    penalty: float
    scales: np.ndarray
    sweeps: int
    converged: bool


def soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def constant_columns(x: np.ndarray) -> np.ndarray:
    """Boolean mask of nonzero columns with zero spread (intercept-like)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return np.zeros(x.shape[1], dtype=bool)
    spread = np.ptp(x, axis=0)
    return (spread == 0.0) & np.any(x != 0.0, axis=0)


def _profile(x_pen, x_unpen, y):
    """Residualize penalized block and response on the unpenalized block."""
    if x_unpen.shape[1] == 0:
        return x_pen, y, None
    proj = pinv(x_unpen)
    return x_pen - x_unpen @ (proj @ x_pen), y - x_unpen @ (proj @ y), proj


def _cd_gram(gram, xty, penalty, tol, max_sweeps):
    """Coordinate descent on min w'Gw - 2c'w + penalty*|w|_1.

    Works on plain Python floats; the active-set loop revisits only nonzero
    coordinates between full sweeps.
    """
    p = len(xty)
    g = gram.tolist()
    diag = [g[j][j] for j in range(p)]
    w = [0.0] * p
    # grad[j] = c_j - (G w)_j
    grad = list(map(float, xty))
    half = 0.5 * penalty
    sweeps = 0

    def sweep(indices):
        biggest = 0.0
        for j in indices:
            gjj = diag[j]
            if gjj <= 0.0:
                continue
            old = w[j]
            rho = grad[j] + gjj * old
            new = soft_threshold(rho, half) / gjj
            delta = new - old
            if delta != 0.0:
                w[j] = new
                row = g[j]
                for k in range(p):
                    grad[k] -= row[k] * delta
                if abs(delta) > biggest:
                    biggest = abs(delta)
        return biggest

    everything = range(p)
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        if sweep(everything) < tol:
            converged = True
            break
        active = [j for j in range(p) if w[j] != 0.0]
        while sweeps < max_sweeps:
            sweeps += 1
            if sweep(active) < tol:
                break
    w = np.array(w)
    if converged:
        w = _polish(gram, np.asarray(xty, dtype=np.float64), half, w)
    return w, sweeps, converged


def _polish(gram, xty, half, w):
    """Exact solve on the support with signs held fixed.

    Coordinate descent stops on a step-size rule, which leaves a gradient
    error proportional to the Gram diagonal. The polished point is kept only
    if it keeps the signs and satisfies the inactive-coordinate conditions.
    """
    support = np.flatnonzero(w)
    if support.size == 0:
        return w
    signs = np.sign(w[support])
    sub = gram[np.ix_(support, support)]
    try:
        w_s = np.linalg.solve(sub, xty[support] - half * signs)
    except np.linalg.LinAlgError:
        return w
    if not np.all(np.sign(w_s) == signs):
        return w
    cand = np.zeros_like(w)
    cand[support] = w_s
    grad = xty - gram @ cand
    slack = 1e-9 * max(half, float(np.max(np.abs(xty))), 1.0)
    inactive = np.ones(w.size, dtype=bool)
    inactive[support] = False
    if np.any(np.abs(grad[inactive]) > half + slack):
        return w
    return cand


def lasso(
    x,
    y,
    penalty: float,
    *,
    unpenalized=None,
    standardize: bool = True,
    tol: float = TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> LassoFit:
    """Solve the penalized least-squares problem for a single response.

    Parameters
    ----------
    x : (n, p) array
    y : (n,) or (n, 1) array
    penalty : float
        Weight on the L1 norm in the sum-of-squares objective.
    unpenalized : bool mask of length p, optional
        Columns left out of the L1 norm. Defaults to intercept-like columns.
    standardize : bool
        Scale penalized columns (after profiling) to unit standard deviation.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if y.shape[1] != 1:
        raise DimensionError("lasso expects a single response column")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"row mismatch: x has {x.shape[0]}, y has {y.shape[0]}")
    if not np.isfinite(penalty) or penalty < 0:
        raise InvalidInputError(f"penalty must be >= 0, got {penalty}")
    n, p = x.shape
    y = y[:, 0]
    if unpenalized is None:
        unpenalized = constant_columns(x)
    unpenalized = np.asarray(unpenalized, dtype=bool)
    pen_idx = np.flatnonzero(~unpenalized)
    unp_idx = np.flatnonzero(unpenalized)

    x_pen, y_res, proj = _profile(x[:, pen_idx], x[:, unp_idx], y)
    if standardize and n > 0:
        scales = np.sqrt(np.mean(x_pen**2, axis=0))
        scales[scales == 0.0] = 1.0
    else:
        scales = np.ones(len(pen_idx))
    xs = x_pen / scales
    w_std, sweeps, converged = _cd_gram(xs.T @ xs, xs.T @ y_res, penalty, tol, max_sweeps)
    w_pen = w_std / scales

    coef = np.zeros(p)
    coef[pen_idx] = w_pen
    if proj is not None:
        coef[unp_idx] = proj @ (y - x[:, pen_idx] @ w_pen)
    return LassoFit(coef, float(penalty), scales, sweeps, converged)


def lasso_path_max(x, y, *, unpenalized=None, standardize: bool = True) -> float:
    """Smallest penalty at which every penalized coefficient is zero."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")[:, 0]
    if unpenalized is None:
        unpenalized = constant_columns(x)
    unpenalized = np.asarray(unpenalized, dtype=bool)
    x_pen, y_res, _ = _profile(x[:, ~unpenalized], x[:, unpenalized], y)
    if x_pen.shape[1] == 0:
        return 0.0
    if standardize:
        scales = np.sqrt(np.mean(x_pen**2, axis=0))
        scales[scales == 0.0] = 1.0
        x_pen = x_pen / scales
    return float(2.0 * np.max(np.abs(x_pen.T @ y_res)))
