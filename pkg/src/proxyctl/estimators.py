"""Proxy-control estimators of the treatment coefficient.

* :func:`estimate_fixed_rank` -- sequential estimate with a known rank bound
* :func:`estimate_adaptive` -- the same with the rank picked by an eigenvalue
  threshold (cross-validated by default)
* :func:`estimate_dr` -- doubly-robust cross-fitted estimate with sandwich
  variance
* :func:`estimate_naive_ols` and :func:`estimate_2sls` -- baselines
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInputError, UnderIdentifiedError
from .inference import Nuisances, ScoreSet, score, variance
from .lasso import lasso
from .numerics import as_matrix, numeric_rank, pinv
from .partialling import DataMatrices, PartialFits, ResidualizedSample, fit_residualizers
from .rrr import RrrFit, cv_lambda, fold_assignments, rrr_fit

__all__ = [
    "DrEstimate",
    "FixedRankEstimate",
    "FoldNuisance",
    "FoldPlan",
    "WeakIdentificationWarning",
    "XiEstimate",
    "beta_from_m",
    "dr_assemble",
    "estimate_2sls",
    "estimate_adaptive",
    "estimate_dr",
    "estimate_fixed_rank",
    "estimate_mu",
    "estimate_naive_ols",
    "estimate_xi",
]

WEAK_CUTOFF = 1e-10


class WeakIdentificationWarning(UserWarning):
    """A Gram matrix the estimator inverts is (nearly) rank deficient."""


@dataclass(frozen=True)
class FixedRankEstimate:
    beta: np.ndarray
    rank_used: int
    rrr: RrrFit
    j_matrix: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class XiEstimate:
    xi: np.ndarray
    penalty: float
    center_y: float
    scale_y: float
    centers: np.ndarray
    scales: np.ndarray
    converged: bool = True


@dataclass(frozen=True)
class FoldPlan:
    """Partition of rows into folds; ``assignments[i]`` is the fold id (0-based)."""

    assignments: np.ndarray
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64).ravel()
        object.__setattr__(self, "assignments", a)
        if a.size == 0:
            raise InvalidInputError("fold plan is empty")
        ids = np.unique(a)
        if ids[0] != 0 or ids[-1] != ids.size - 1:
            raise InvalidInputError("fold ids must be 0..J-1 with every fold nonempty")

    @classmethod
    def make(cls, n: int, folds: int = 5, seed: int = 0) -> FoldPlan:
        return cls(fold_assignments(n, folds, seed), seed)

    @property
    def folds(self) -> int:
        return int(self.assignments.max()) + 1

    @property
    def n(self) -> int:
        return self.assignments.size


@dataclass(frozen=True)
class FoldNuisance:
    """Nuisance estimates fitted outside one fold."""

    xi: np.ndarray
    mu: np.ndarray
    partial: PartialFits
    rank: int = 0
    lam: float | None = None
    xi_fit: XiEstimate | None = None
    q_eigs: np.ndarray | None = None

    def as_nuisances(self) -> Nuisances:
        g, o = self.partial.gamma, self.partial.omega
        return Nuisances(
            xi=self.xi, mu=self.mu,
            gamma_y=g["y"].coeffs, gamma_v=g["v"].coeffs,
            gamma_x1=g["x"].coeffs, gamma_x2=g["x"].coeffs,
            omega_z=o["z"].coeffs, omega_y=o["y"].coeffs, omega_v=o["v"].coeffs,
        )


@dataclass(frozen=True)
class DrEstimate:
    beta: np.ndarray
    sigma2: np.ndarray
    folds: int
    per_fold: list[FoldNuisance]
    scores: np.ndarray
    sigma_x: np.ndarray
    lam: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.scores.shape[0]


def _check_sample(data: DataMatrices):
    dims = data.dims
    if data.n <= dims["x"] + dims["d"]:
        raise InvalidInputError(f"need n > d_X + d_D, got n={data.n}")


def beta_from_m(resid: ResidualizedSample, m: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """Second step: regress y_hat on (x_hat, zx_hat @ m.T), keep the x block.

    Returns ``(beta, j_matrix, diagnostics)`` where ``j_matrix`` is
    ``(d_Z + d_X) x (d_X + d_V)``.
    """
    zx = resid.zx_hat
    d_x = resid.hat["x"].shape[1]
    d_z = resid.hat["z"].shape[1]
    select_x = np.vstack([np.zeros((d_z, d_x)), np.eye(d_x)])
    j = np.hstack([select_x, m.T])
    gram = j.T @ (zx.T @ zx) @ j
    coef = pinv(gram) @ (j.T @ (zx.T @ resid.hat["y"]))
    gram_rank = numeric_rank(gram, WEAK_CUTOFF) if gram.size else 0
    diag = {
        "second_stage_rank": gram_rank,
        "second_stage_expected_rank": d_x + numeric_rank(m, 1e-8) if m.size else d_x,
    }
    diag["degenerate"] = bool(gram_rank < diag["second_stage_expected_rank"])
    return coef[:d_x, 0], j, diag


def _fixed_from_fit(resid, fit: RrrFit) -> FixedRankEstimate:
    beta, j, diag = beta_from_m(resid, fit.m_hat)
    diag["q_eigs"] = fit.q_eigs.tolist()
    if diag["degenerate"]:
        warnings.warn("second-stage Gram matrix is rank deficient", WeakIdentificationWarning, stacklevel=3)
    return FixedRankEstimate(beta, fit.rank, fit, j, diag)


def _resid_full(data, mode, penalties, seed):
    return fit_residualizers(data, None, mode, penalties, seed, include_check=False).apply(data)


def estimate_fixed_rank(
    data: DataMatrices,
    r: int,
    *,
    mode: str = "ols",
    penalties: dict[str, float] | None = None,
    seed: int = 0,
) -> FixedRankEstimate:
    """Sequential estimate with the proxy-outcome coefficient restricted to rank ``r``."""
    _check_sample(data)
    d_v = data.dims["v"]
    if r < 0 or r > d_v:
        raise InvalidInputError(f"rank must lie in [0, d_V={d_v}], got {r}")
    resid = _resid_full(data, mode, penalties, seed)
    return _fixed_from_fit(resid, rrr_fit(resid.hat["v"], resid.zx_hat, rank=r))


def estimate_adaptive(
    data: DataMatrices,
    lam: float | None = None,
    cv_folds: int = 5,
    *,
    grid=None,
    mode: str = "ols",
    penalties: dict[str, float] | None = None,
    seed: int = 0,
) -> FixedRankEstimate:
    """Sequential estimate at the rank selected by eigenvalue threshold ``lam``.

    ``lam=None`` cross-validates the threshold with ``cv_folds`` folds.
    """
    _check_sample(data)
    diag_cv = {}
    if lam is None:
        lam, curve = cv_lambda(data, cv_folds, grid, seed=seed, mode=mode, penalties=penalties)
        diag_cv["cv_curve"] = curve
    resid = _resid_full(data, mode, penalties, seed)
    est = _fixed_from_fit(resid, rrr_fit(resid.hat["v"], resid.zx_hat, lam=lam))
    est.diagnostics.update(diag_cv)
    est.diagnostics["lambda"] = lam
    return est


def estimate_xi(resid: ResidualizedSample, m_unrestricted, delta: float | None = None) -> XiEstimate:
    """Sparse coefficient on the proxy outcomes via standardized Lasso.

    The design is ``z_check @ m_unrestricted[:, :d_Z].T``. Response and design
    columns are centered and scaled to unit variance, and the penalty ``delta``
    (default ``d_V / n``) weighs the L1 norm against the mean squared residual
    with the usual one-half factor. Coefficients are returned on the original
    scale.
    """
    m = as_matrix(m_unrestricted, "m_unrestricted")
    z = resid.check["z"]
    y = resid.check["y"][:, 0]
    n, d_z = z.shape
    d_v = m.shape[0]
    if m.shape[1] < d_z:
        raise DimensionError(f"m_unrestricted needs at least d_Z={d_z} columns")
    if delta is None:
        delta = d_v / n
    if not np.isfinite(delta) or delta < 0:
        raise InvalidInputError(f"delta must be >= 0, got {delta}")
    design = z @ m[:, :d_z].T
    centers = design.mean(axis=0)
    scales = design.std(axis=0)
    live = scales > 1e-12 * max(scales.max(initial=0.0), 1e-300)
    cy, sy = float(y.mean()), float(y.std())
    xi = np.zeros(d_v)
    converged = True
    if sy > 0 and live.any():
        xs = (design[:, live] - centers[live]) / scales[live]
        ys = (y - cy) / sy
        fit = lasso(xs, ys, 2.0 * n * delta, unpenalized=np.zeros(xs.shape[1], bool), standardize=False)
        xi[live] = fit.coef * sy / scales[live]
        converged = fit.converged
    return XiEstimate(xi, float(delta), cy, sy, centers, scales, converged)


def estimate_mu(resid: ResidualizedSample, m_hat) -> np.ndarray:
    """``X'(Z,X) m' (m_Z Zc'Zc m_Z')^+ m_Z`` with ``m_Z`` the first d_Z columns."""
    m = as_matrix(m_hat, "m_hat")
    zx = resid.zx_hat
    x = resid.hat["x"]
    zc = resid.check["z"]
    d_z = zc.shape[1]
    if m.shape[1] != zx.shape[1]:
        raise DimensionError(f"m_hat must have {zx.shape[1]} columns, got {m.shape[1]}")
    m_z = m[:, :d_z]
    middle = m_z @ (zc.T @ zc) @ m_z.T
    return (x.T @ zx) @ m.T @ pinv(middle) @ m_z


def _weak_ratio(resid, m, rank):
    """r-th over first singular value of ``m_Z Zc'Zc m_Z'``."""
    if rank == 0:
        return 1.0
    d_z = resid.check["z"].shape[1]
    m_z = m[:, :d_z]
    s = np.linalg.svd(m_z @ (resid.check["z"].T @ resid.check["z"]) @ m_z.T, compute_uv=False)
    if s[0] <= 0:
        return 0.0
    return float(s[min(rank, s.size) - 1] / s[0])


def fit_fold_nuisance(
    data: DataMatrices,
    train,
    lam: float,
    delta: float | None = None,
    *,
    mode: str = "ols",
    penalties: dict[str, float] | None = None,
    seed: int = 0,
) -> tuple[FoldNuisance, float]:
    partial = fit_residualizers(data, train, mode, penalties, seed)
    tr = partial.apply(data, train)
    fit = rrr_fit(tr.hat["v"], tr.zx_hat, lam=lam)
    mu = estimate_mu(tr, fit.m_hat)
    xi_fit = estimate_xi(tr, fit.m_full, delta)
    nuis = FoldNuisance(xi_fit.xi, mu, partial, fit.rank, lam, xi_fit, fit.q_eigs)
    return nuis, _weak_ratio(tr, fit.m_hat, fit.rank)


def dr_assemble(data: DataMatrices, plan: FoldPlan, per_fold: list[FoldNuisance]):
    """Solve the cross-fitted empirical score equation for beta.

    Returns ``(beta, scores, sigma_x)``: the score rows are evaluated at the
    solution and ordered like the rows of ``data``.
    """
    if plan.n != data.n:
        raise DimensionError("fold plan and data disagree on n")
    n, d_x = data.n, data.dims["x"]
    base = np.zeros((n, d_x))
    sxx = np.zeros((d_x, d_x))
    parts = []
    for j in range(plan.folds):
        rows = np.flatnonzero(plan.assignments == j)
        nuis = per_fold[j].as_nuisances()
        sub = data.take(rows)
        base[rows] = score(sub.y, sub.x, sub.z, sub.v, sub.d, np.zeros(d_x), nuis)
        x_hat = sub.x - sub.d @ nuis.gamma_x2
        x_out = sub.x - sub.d @ nuis.gamma_x1
        sxx += x_out.T @ x_hat
        parts.append((rows, x_out, x_hat))
    sigma_x = sxx / n
    beta = pinv(sigma_x) @ base.mean(axis=0)
    scores = base.copy()
    for rows, x_out, x_hat in parts:
        scores[rows] -= x_out * (x_hat @ beta)[:, None]
    return beta, scores, sigma_x


def estimate_dr(
    data: DataMatrices,
    folds: FoldPlan | None = None,
    lam: float | None = None,
    delta: float | None = None,
    *,
    strict: bool = False,
    cv_folds: int = 5,
    mode: str = "ols",
    penalties: dict[str, float] | None = None,
    seed: int = 0,
) -> DrEstimate:
    """Doubly-robust estimate with cross-fitting.

    When ``lam`` is None the threshold is cross-validated once on the full
    sample and reused in every fold; ``strict=True`` re-validates it on each
    training fold instead.
    """
    _check_sample(data)
    if folds is None:
        folds = FoldPlan.make(data.n, 5, seed)
    if folds.n != data.n:
        raise DimensionError("fold plan and data disagree on n")
    if folds.folds < 2:
        raise InvalidInputError("need at least 2 folds")
    need = data.dims["x"] + data.dims["d"]
    for j in range(folds.folds):
        if np.sum(folds.assignments != j) <= need:
            raise InvalidInputError(f"training complement of fold {j} has too few rows")
    diag = {}
    if lam is None and not strict:
        lam, _ = cv_lambda(data, cv_folds, seed=seed, mode=mode, penalties=penalties)
    per_fold, ratios = [], []
    for j in range(folds.folds):
        train = np.flatnonzero(folds.assignments != j)
        lam_j = lam
        if lam_j is None:
            lam_j, _ = cv_lambda(data.take(train), cv_folds, seed=seed, mode=mode, penalties=penalties)
        nuis, ratio = fit_fold_nuisance(data, train, lam_j, delta, mode=mode, penalties=penalties, seed=seed)
        per_fold.append(nuis)
        ratios.append(ratio)
    diag["ranks"] = [f.rank for f in per_fold]
    diag["q_eigs"] = [f.q_eigs.tolist() for f in per_fold]
    diag["weak_identification_ratio"] = min(ratios)
    diag["weak_identification"] = bool(min(ratios) < WEAK_CUTOFF)
    if diag["weak_identification"]:
        warnings.warn("proxy Gram matrix in mu is nearly singular", WeakIdentificationWarning, stacklevel=2)
    beta, scores, sigma_x = dr_assemble(data, folds, per_fold)
    sigma2 = variance(ScoreSet(scores, sigma_x))
    return DrEstimate(beta, sigma2, folds.folds, per_fold, scores, sigma_x, lam, diag)


def estimate_naive_ols(data: DataMatrices) -> np.ndarray:
    """OLS of y on (X, V, D); the proxies act as ordinary controls."""
    dims = data.dims
    if data.n <= dims["x"] + dims["v"] + dims["d"]:
        raise InvalidInputError("need n > d_X + d_V + d_D for the naive regression")
    r = np.hstack([data.x, data.v, data.d])
    coef = pinv(r.T @ r) @ (r.T @ data.y)
    return coef[: dims["x"], 0]


def estimate_2sls(data: DataMatrices) -> np.ndarray:
    """Two-stage least squares: V endogenous, Z instruments, X and D exogenous."""
    dims = data.dims
    if dims["z"] < dims["v"]:
        raise UnderIdentifiedError(f"need d_Z >= d_V, got d_Z={dims['z']}, d_V={dims['v']}")
    inst = np.hstack([data.z, data.x, data.d])
    reg = np.hstack([data.x, data.v, data.d])
    first = pinv(inst.T @ inst) @ (inst.T @ reg)
    fitted = inst @ first
    # instrument strength net of the exogenous columns
    exo = np.hstack([data.x, data.d])
    proj = pinv(exo)
    z_part = data.z - exo @ (proj @ data.z)
    v_part = data.v - exo @ (proj @ data.v)
    s = np.linalg.svd(z_part @ (pinv(z_part) @ v_part), compute_uv=False)
    scale = max(float(np.linalg.norm(v_part, 2)), np.finfo(float).tiny)
    if s.size and s[-1] < 1e-8 * scale:
        warnings.warn("first stage is nearly rank deficient (weak instruments)",
                      WeakIdentificationWarning, stacklevel=2)
    coef = pinv(fitted.T @ reg) @ (fitted.T @ data.y)
    return coef[: dims["x"], 0]
