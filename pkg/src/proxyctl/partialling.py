"""Partialling out controls (and treatments) from the observed variables.

Two residual families are produced for a sample:

* hat residuals: ``H - D @ gamma_H`` for H in y, x, z, v (controls removed)
* check residuals: ``H - (X, D) @ omega_H`` for H in y, z, v (treatments and
  controls removed)

Coefficients may be fitted on one set of rows and applied to another, which is
what cross-fitting needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInputError
from .lasso import constant_columns, lasso, lasso_path_max
from .numerics import as_matrix, pinv

__all__ = [
    "DataMatrices",
    "PartialFits",
    "ResidualizedSample",
    "ResidualizerFit",
    "cv_lasso_penalty",
    "fit_lasso_residualizer",
    "fit_ols_residualizer",
    "fit_residualizers",
    "residualize",
]

HAT_ROLES = ("y", "x", "z", "v")
CHECK_ROLES = ("y", "z", "v")


@dataclass(frozen=True)
class DataMatrices:
    """Observed sample. ``d`` must start with a column of ones."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    v: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        for role in ("y", "x", "z", "v", "d"):
            object.__setattr__(self, role, as_matrix(getattr(self, role), role))
        n = self.y.shape[0]
        if self.y.shape[1] != 1:
            raise DimensionError("y must have exactly one column")
        for role in ("x", "z", "v", "d"):
            if getattr(self, role).shape[0] != n:
                raise DimensionError(f"{role} has {getattr(self, role).shape[0]} rows, y has {n}")
        if self.d.shape[1] < 1 or not np.all(self.d[:, 0] == 1.0):
            raise InvalidInputError("first column of d must be identically 1")

    @classmethod
    def from_arrays(cls, y, x, z, v, d=None) -> DataMatrices:
        y = as_matrix(y, "y")
        if d is None:
            d = np.ones((y.shape[0], 1))
        return cls(y, x, z, v, d)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dims(self) -> dict[str, int]:
        return {role: getattr(self, role).shape[1] for role in ("x", "z", "v", "d")}

    @property
    def xd(self) -> np.ndarray:
        return np.hstack([self.x, self.d])

    def take(self, rows) -> DataMatrices:
        rows = np.asarray(rows)
        return DataMatrices(self.y[rows], self.x[rows], self.z[rows], self.v[rows], self.d[rows])


@dataclass(frozen=True)
class ResidualizerFit:
    """Fitted partialling coefficients for one target role."""

    coeffs: np.ndarray
    mode: str
    role: str = ""
    penalties: tuple[float, ...] | None = None

    def residual(self, regressors, target) -> np.ndarray:
        return as_matrix(target) - as_matrix(regressors) @ self.coeffs


@dataclass
class ResidualizedSample:
    """Residualized rows of a sample together with the fits that produced them."""

    hat: dict[str, np.ndarray]
    check: dict[str, np.ndarray]
    fits: dict[str, ResidualizerFit] = field(default_factory=dict)
    rows: np.ndarray | None = None

    @property
    def zx_hat(self) -> np.ndarray:
        return np.hstack([self.hat["z"], self.hat["x"]])

    @property
    def n(self) -> int:
        return self.hat["y"].shape[0]


def fit_ols_residualizer(regressors, target, role: str = "") -> ResidualizerFit:
    """Least-squares coefficients ``(R'R)^+ R' H``."""
    r = as_matrix(regressors, "regressors")
    h = as_matrix(target, "target")
    if r.shape[0] != h.shape[0]:
        raise DimensionError(f"row mismatch: regressors {r.shape[0]}, target {h.shape[0]}")
    coeffs = pinv(r.T @ r) @ (r.T @ h)
    return ResidualizerFit(coeffs, "ols", role)


def fit_lasso_residualizer(regressors, target, penalty, role: str = "") -> ResidualizerFit:
    """Lasso coefficients column by column; intercept-like columns unpenalized.

    ``penalty`` is a scalar or one value per target column.
    """
    r = as_matrix(regressors, "regressors")
    h = as_matrix(target, "target")
    if r.shape[0] != h.shape[0]:
        raise DimensionError(f"row mismatch: regressors {r.shape[0]}, target {h.shape[0]}")
    pens = np.broadcast_to(np.asarray(penalty, dtype=np.float64), (h.shape[1],))
    if np.any(pens < 0) or not np.all(np.isfinite(pens)):
        raise InvalidInputError("lasso penalty must be finite and >= 0")
    unpen = constant_columns(r)
    coeffs = np.column_stack(
        [lasso(r, h[:, k], float(pens[k]), unpenalized=unpen).coef for k in range(h.shape[1])]
    ) if h.shape[1] else np.zeros((r.shape[1], 0))
    return ResidualizerFit(coeffs, "lasso", role, tuple(float(p) for p in pens))


def cv_lasso_penalty(regressors, target, *, folds: int = 5, n_grid: int = 20, seed: int = 0) -> float:
    """Cross-validated penalty over a geometric grid below the zeroing threshold."""
    r = as_matrix(regressors, "regressors")
    h = as_matrix(target, "target")
    n = r.shape[0]
    unpen = constant_columns(r)
    top = lasso_path_max(r, h, unpenalized=unpen)
    if top <= 0.0:
        return 0.0
    grid = np.geomspace(top, top * 1e-3, n_grid)
    assign = np.random.default_rng(seed).permutation(n) % folds
    scores = np.zeros(n_grid)
    for j in range(folds):
        train, test = assign != j, assign == j
        for g, pen in enumerate(grid):
            coef = lasso(r[train], h[train], pen, unpenalized=unpen).coef
            scores[g] += np.sum((h[test, 0] - r[test] @ coef) ** 2)
    # first minimum on a descending grid is the largest penalty attaining it
    return float(grid[int(np.argmin(scores))])


def _as_rows(rows, n: int) -> np.ndarray:
    """Integer row indices from None (all rows), a boolean mask, or indices."""
    if rows is None:
        return np.arange(n)
    rows = np.asarray(rows)
    if rows.dtype == bool:
        if rows.shape != (n,):
            raise DimensionError(f"row mask has length {rows.shape}, sample has {n} rows")
        return np.flatnonzero(rows)
    rows = rows.astype(np.int64).ravel()
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise InvalidInputError("row index out of range")
    return rows


@dataclass
class PartialFits:
    """Gamma (on D) and omega (on (X, D)) fits for every role."""

    gamma: dict[str, ResidualizerFit]
    omega: dict[str, ResidualizerFit]

    def apply(self, data: DataMatrices, rows=None) -> ResidualizedSample:
        rows = _as_rows(rows, data.n)
        d = data.d[rows]
        xd = np.hstack([data.x[rows], d])
        hat = {h: self.gamma[h].residual(d, getattr(data, h)[rows]) for h in HAT_ROLES}
        check = {h: f.residual(xd, getattr(data, h)[rows]) for h, f in self.omega.items()}
        fits = {f"gamma_{h}": f for h, f in self.gamma.items()}
        fits.update({f"omega_{h}": f for h, f in self.omega.items()})
        return ResidualizedSample(hat, check, fits, rows)


def fit_residualizers(
    data: DataMatrices,
    fit_on=None,
    mode: str = "ols",
    penalties: dict[str, float] | None = None,
    seed: int = 0,
    include_check: bool = True,
) -> PartialFits:
    """Fit gamma and omega coefficients on the rows ``fit_on``.

    In lasso mode, ``penalties`` maps keys like ``"gamma_y"`` or ``"omega_v"``
    to penalty values; missing keys are cross-validated per column.
    """
    fit_on = _as_rows(fit_on, data.n)
    if fit_on.size == 0:
        raise InvalidInputError("fit_on must be nonempty")
    if mode not in ("ols", "lasso"):
        raise InvalidInputError(f"unknown partialling mode {mode!r}")
    d = data.d[fit_on]
    xd = np.hstack([data.x[fit_on], d])
    penalties = dict(penalties or {})

    def fit(regs, target, key):
        if mode == "ols":
            return fit_ols_residualizer(regs, target, key)
        if key in penalties:
            pen = penalties[key]
        else:
            pen = [cv_lasso_penalty(regs, target[:, [k]], seed=seed) for k in range(target.shape[1])]
        return fit_lasso_residualizer(regs, target, pen, key)

    gamma = {h: fit(d, getattr(data, h)[fit_on], f"gamma_{h}") for h in HAT_ROLES}
    omega = {}
    if include_check:
        omega = {h: fit(xd, getattr(data, h)[fit_on], f"omega_{h}") for h in CHECK_ROLES}
    return PartialFits(gamma, omega)


def residualize(
    data: DataMatrices,
    fit_on=None,
    apply_on=None,
    mode: str = "ols",
    penalties: dict[str, float] | None = None,
    seed: int = 0,
) -> ResidualizedSample:
    """Fit partialling coefficients on ``fit_on`` and residualize ``apply_on``."""
    fits = fit_residualizers(data, fit_on, mode, penalties, seed)
    return fits.apply(data, apply_on)
