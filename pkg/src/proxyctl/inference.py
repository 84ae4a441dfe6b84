"""Doubly-robust score, DML2 sandwich variance and Gaussian intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError
from .numerics import as_matrix, pinv

__all__ = [
    "ConfidenceInterval",
    "Nuisances",
    "ScoreSet",
    "confidence_interval",
    "norm_cdf",
    "norm_ppf",
    "score",
    "variance",
]


@dataclass(frozen=True)
class Nuisances:
    """Arguments of the score besides beta.

    gamma_* are ``d_D x d_H`` coefficients on D, omega_* are
    ``(d_X + d_D) x d_H`` coefficients on (X, D). ``gamma_x1`` multiplies the
    outside factor, ``gamma_x2`` the one inside the outcome residual.
    """

    xi: np.ndarray
    mu: np.ndarray
    gamma_y: np.ndarray
    gamma_v: np.ndarray
    gamma_x1: np.ndarray
    gamma_x2: np.ndarray
    omega_z: np.ndarray
    omega_y: np.ndarray
    omega_v: np.ndarray

    def replace(self, **changes) -> Nuisances:
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return Nuisances(**fields)


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    sigma_x: np.ndarray

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class ConfidenceInterval:
    contrast: np.ndarray
    level: float
    lower: float
    upper: float
    center: float

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def score(y, x, z, v, d, beta, nuis: Nuisances) -> np.ndarray:
    """Per-observation score rows, shape ``(n, d_X)``."""
    y, x, z, v, d = (as_matrix(a, name) for a, name in zip((y, x, z, v, d), "yxzvd"))
    n = y.shape[0]
    if any(a.shape[0] != n for a in (x, z, v, d)):
        raise DimensionError("all blocks need the same number of rows")
    d_x, d_z, d_v, d_d = x.shape[1], z.shape[1], v.shape[1], d.shape[1]
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    xi = np.asarray(nuis.xi, dtype=np.float64).reshape(-1)
    mu = as_matrix(nuis.mu, "mu")
    if beta.size != d_x or xi.size != d_v or mu.shape != (d_x, d_z):
        raise DimensionError("beta, xi or mu does not conform to the data")
    expect = {
        "gamma_y": (d_d, 1), "gamma_v": (d_d, d_v), "gamma_x1": (d_d, d_x),
        "gamma_x2": (d_d, d_x), "omega_z": (d_x + d_d, d_z),
        "omega_y": (d_x + d_d, 1), "omega_v": (d_x + d_d, d_v),
    }
    for key, shape in expect.items():
        if np.shape(getattr(nuis, key)) != shape:
            raise DimensionError(f"{key} must have shape {shape}, got {np.shape(getattr(nuis, key))}")
    xd = np.hstack([x, d])
    x1 = x - d @ nuis.gamma_x1
    x2 = x - d @ nuis.gamma_x2
    y_t = y[:, 0] - (d @ nuis.gamma_y)[:, 0]
    v_t = v - d @ nuis.gamma_v
    z_b = z - xd @ nuis.omega_z
    y_b = y[:, 0] - (xd @ nuis.omega_y)[:, 0]
    v_b = v - xd @ nuis.omega_v
    outcome = y_t - v_t @ xi - x2 @ beta
    proxy = y_b - v_b @ xi
    return x1 * outcome[:, None] - (z_b * proxy[:, None]) @ mu.T


def variance(scores: ScoreSet) -> np.ndarray:
    """Sandwich ``S^+ (mean g g') S^+`` for the DML2 estimator."""
    g = as_matrix(scores.scores, "scores")
    n = g.shape[0]
    if n < 2:
        raise InvalidInputError(f"variance needs n >= 2, got {n}")
    s_inv = pinv(scores.sigma_x)
    out = s_inv @ (g.T @ g / n) @ s_inv
    return 0.5 * (out + out.T)


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# Acklam's rational approximation coefficients
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Standard normal quantile: rational approximation plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"probability must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    e = norm_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def confidence_interval(beta, sigma2, l, level: float, n: int) -> ConfidenceInterval:
    """Interval ``l'beta +/- z_{1-alpha/2} sqrt(l' sigma2 l / n)``."""
    if not 0.0 < level < 1.0:
        raise InvalidInputError(f"level must lie in (0, 1), got {level}")
    if n < 1:
        raise InvalidInputError(f"n must be positive, got {n}")
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    l = np.asarray(l, dtype=np.float64).reshape(-1)
    sigma2 = as_matrix(sigma2, "sigma2")
    if l.size != beta.size or sigma2.shape != (beta.size, beta.size):
        raise DimensionError("contrast, beta and sigma2 do not conform")
    center = float(l @ beta)
    half = norm_ppf(1.0 - (1.0 - level) / 2.0) * math.sqrt(max(float(l @ sigma2 @ l), 0.0) / n)
    return ConfidenceInterval(l, level, center - half, center + half, center)
