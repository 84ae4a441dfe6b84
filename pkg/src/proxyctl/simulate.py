"""Monte Carlo data-generating process and its exact population moments.

The linear system is

    V = B0 W + u_V,   X = T0 W + u_X,   Z = C0 W + G0 X + u_Z,
    Y = X'beta0 + F0 W + chi0 V + u_Y,   W ~ N(0, I)

with Gaussian residuals. Coefficient entries are N(0, 1/sqrt(columns)) by
default; ``coef_variance="inverse_cols"`` selects variance 1/columns, which
keeps each equation's signal-to-noise ratio stable as dimensions grow. Each
residual covariance is a rescaled inverse Wishart:
``d * p * Sigma^{-1} ~ Wishart_d(I, d * p)``.

Random numbers come from numpy's Philox counter-based bit generator seeded
through ``SeedSequence([seed, *stream])``; normals use numpy's ziggurat
sampler. Given the same numpy version the streams are platform independent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import ConfigError
from .numerics import cholesky, numeric_rank, pinv, sqrt_psd
from .partialling import DataMatrices

__all__ = [
    "DgpParams",
    "DgpSpec",
    "PopulationMoments",
    "SimulatedDataset",
    "draw_dataset",
    "draw_params",
    "make_rng",
    "moment_matched_sample",
    "population_moments",
    "wishart_bartlett",
]

COEF_NAMES = ("beta0", "B0", "T0", "C0", "G0", "F0", "chi0")
COEF_SCALES = {"inverse_cols": -0.5, "inverse_sqrt_cols": -0.25}
COV_NAMES = ("Sigma_V", "Sigma_X", "Sigma_Z", "Sigma_Y")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``(seed, *stream)``; independent across streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class DgpSpec:
    d_w: int
    d_v: int
    d_z: int | None = None
    d_x: int = 1
    n: int = 1000
    p: int = 2
    seed: int = 0
    overrides: dict = field(default_factory=dict)
    coef_variance: str = "inverse_sqrt_cols"

    def __post_init__(self):
        if self.coef_variance not in COEF_SCALES:
            raise ConfigError(f"coef_variance must be one of {sorted(COEF_SCALES)}")
        if self.d_z is None:
            object.__setattr__(self, "d_z", self.d_v)
        for name in ("d_w", "d_v", "d_z", "d_x", "n", "p"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        unknown = set(self.overrides) - set(COEF_NAMES) - set(COV_NAMES)
        if unknown:
            raise ConfigError(f"unknown parameter overrides: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> DgpSpec:
        allowed = set(cls.__dataclass_fields__)
        extra = set(raw) - allowed
        if extra:
            raise ConfigError(f"unknown DGP fields: {sorted(extra)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class DgpParams:
    beta0: np.ndarray   # (d_x,)
    B0: np.ndarray      # d_v x d_w
    T0: np.ndarray      # d_x x d_w
    C0: np.ndarray      # d_z x d_w
    G0: np.ndarray      # d_z x d_x
    F0: np.ndarray      # 1 x d_w
    chi0: np.ndarray    # 1 x d_v
    Sigma_V: np.ndarray
    Sigma_X: np.ndarray
    Sigma_Z: np.ndarray
    Sigma_Y: np.ndarray

    @property
    def dims(self) -> dict[str, int]:
        return {"w": self.B0.shape[1], "v": self.B0.shape[0], "z": self.C0.shape[0], "x": self.T0.shape[0]}

    @property
    def A0(self) -> np.ndarray:
        return self.F0 + self.chi0 @ self.B0

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in COEF_NAMES + COV_NAMES}

    @classmethod
    def from_dict(cls, raw: dict) -> DgpParams:
        return cls(**{k: np.asarray(raw[k], dtype=np.float64) for k in COEF_NAMES + COV_NAMES})

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class SimulatedDataset:
    data: DataMatrices
    params: DgpParams
    w: np.ndarray


def wishart_bartlett(scale, df: float, rng: np.random.Generator) -> np.ndarray:
    """One Wishart(scale, df) draw by the Bartlett decomposition."""
    scale = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    d = scale.shape[0]
    if df <= d - 1:
        raise ConfigError(f"Wishart needs df > d - 1, got df={df}, d={d}")
    chol = cholesky(scale)
    a = np.zeros((d, d))
    a[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    rows, cols = np.tril_indices(d, -1)
    a[rows, cols] = rng.standard_normal(rows.size)
    la = chol @ a
    return la @ la.T


def _inverse_wishart_cov(d: int, p: int, rng) -> np.ndarray:
    g = wishart_bartlett(np.eye(d), d * p, rng)
    l_inv = np.linalg.inv(cholesky(g))
    cov = d * p * (l_inv.T @ l_inv)
    return 0.5 * (cov + cov.T)


def _override(value, shape):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        if len(shape) == 2 and shape[0] == shape[1] and shape[0] > 1:
            return float(arr) * np.eye(shape[0])
        return np.full(shape, float(arr))
    return arr.reshape(shape)


def draw_params(spec: DgpSpec, rng: np.random.Generator | None = None) -> DgpParams:
    """Draw coefficients and residual covariances.

    Every draw is consumed in a fixed order regardless of overrides so that
    overriding one block leaves the others unchanged.
    """
    if rng is None:
        rng = make_rng(spec.seed)
    w, v, z, x = spec.d_w, spec.d_v, spec.d_z, spec.d_x
    exponent = COEF_SCALES[spec.coef_variance]

    def coef(rows, cols):
        return rng.standard_normal((rows, cols)) * cols ** exponent

    drawn = {
        "beta0": coef(1, x).reshape(x),
        "B0": coef(v, w),
        "T0": coef(x, w),
        "C0": coef(z, w),
        "G0": coef(z, x),
        "F0": coef(1, w),
        "chi0": coef(1, v),
        "Sigma_V": _inverse_wishart_cov(v, spec.p, rng),
        "Sigma_X": _inverse_wishart_cov(x, spec.p, rng),
        "Sigma_Z": _inverse_wishart_cov(z, spec.p, rng),
        "Sigma_Y": _inverse_wishart_cov(1, spec.p, rng),
    }
    for key, value in spec.overrides.items():
        drawn[key] = _override(value, drawn[key].shape)
    return DgpParams(**drawn)


def _gaussian(cov, n, rng):
    root = sqrt_psd(cov)
    return rng.standard_normal((n, cov.shape[0])) @ root


def draw_dataset(params: DgpParams, n: int, rng: np.random.Generator) -> SimulatedDataset:
    """Draw ``n`` i.i.d. rows; D is a single column of ones."""
    if n < 1:
        raise ConfigError(f"n must be positive, got {n}")
    dw = params.dims["w"]
    w = rng.standard_normal((n, dw))
    u_v = _gaussian(params.Sigma_V, n, rng)
    u_x = _gaussian(params.Sigma_X, n, rng)
    u_z = _gaussian(params.Sigma_Z, n, rng)
    u_y = _gaussian(params.Sigma_Y, n, rng)
    v = w @ params.B0.T + u_v
    x = w @ params.T0.T + u_x
    z = w @ params.C0.T + x @ params.G0.T + u_z
    y = x @ params.beta0.reshape(-1, 1) + w @ params.F0.T + v @ params.chi0.T + u_y
    data = DataMatrices(y, x, z, v, np.ones((n, 1)))
    return SimulatedDataset(data, params, w)


@dataclass(frozen=True)
class PopulationMoments:
    """Exact second moments of (W, X, Z, V, Y) and the implied nuisances.

    All variables have mean zero and the only control is the constant, so the
    control-partialled variables equal the raw ones.
    """

    sigma: np.ndarray
    slices: dict
    m0: np.ndarray
    mu0: np.ndarray
    xi0: np.ndarray
    omega0: dict
    gamma0: dict
    degenerate: bool

    def block(self, a: str, b: str) -> np.ndarray:
        return self.sigma[self.slices[a], self.slices[b]]


def _joint_cov(params: DgpParams):
    dims = params.dims
    dw, dx, dz, dv = dims["w"], dims["x"], dims["z"], dims["v"]
    # shocks: W, u_X, u_Z, u_V, u_Y
    ks = [dw, dx, dz, dv, 1]
    off = np.cumsum([0] + ks)
    k = off[-1]
    shock_cov = np.zeros((k, k))
    for i, cov in enumerate((np.eye(dw), params.Sigma_X, params.Sigma_Z, params.Sigma_V, params.Sigma_Y)):
        shock_cov[off[i]:off[i + 1], off[i]:off[i + 1]] = cov

    def sel(i, rows):
        out = np.zeros((rows, k))
        out[:, off[i]:off[i + 1]] = np.eye(rows)
        return out

    lw = sel(0, dw)
    lx = params.T0 @ lw + sel(1, dx)
    lz = params.C0 @ lw + params.G0 @ lx + sel(2, dz)
    lv = params.B0 @ lw + sel(3, dv)
    ly = params.beta0.reshape(1, -1) @ lx + params.F0 @ lw + params.chi0 @ lv + sel(4, 1)
    load = np.vstack([lw, lx, lz, lv, ly])
    sigma = load @ shock_cov @ load.T
    names = ("w", "x", "z", "v", "y")
    sizes = (dw, dx, dz, dv, 1)
    starts = np.cumsum((0,) + sizes)
    slices = {nm: slice(int(starts[i]), int(starts[i + 1])) for i, nm in enumerate(names)}
    return 0.5 * (sigma + sigma.T), slices


def _min_l1_xi(m0, b):
    """Minimal-L1 ``xi`` with ``m0' xi = b`` (b assumed in range)."""
    u, s, vt = np.linalg.svd(m0.T, full_matrices=False)
    k = int(np.sum(s > 1e-10 * s[0])) if s.size and s[0] > 0 else 0
    d_v = m0.shape[0]
    if k == 0:
        return np.zeros(d_v)
    a = vt[:k]                      # k x d_v
    t = (u[:, :k].T @ b) / s[:k]
    res = linprog(np.ones(2 * d_v), A_eq=np.hstack([a, -a]), b_eq=t,
                  bounds=[(0, None)] * (2 * d_v), method="highs")
    xi = res.x[:d_v] - res.x[d_v:] if res.success else pinv(a) @ t
    support = np.abs(xi) > 1e-9 * max(np.abs(xi).max(), 1e-300)
    polished = np.zeros(d_v)
    polished[support] = np.linalg.lstsq(a[:, support], t, rcond=None)[0]
    return polished


def population_moments(params: DgpParams) -> PopulationMoments:
    """Closed-form population objects implied by ``params``."""
    sigma, sl = _joint_cov(params)
    dims = params.dims
    dx, dz = dims["x"], dims["z"]

    def blk(a, b):
        return sigma[sl[a], sl[b]]

    s_xx = blk("x", "x")
    s_xx_inv = pinv(s_xx)
    omega0, gamma0 = {}, {}
    for h in ("w", "x", "z", "v", "y"):
        coef_x = s_xx_inv @ blk("x", h)
        omega0[h] = np.vstack([coef_x, np.zeros((1, coef_x.shape[1]))])
        gamma0[h] = np.zeros((1, sl[h].stop - sl[h].start))

    zx = np.r_[np.arange(sl["z"].start, sl["z"].stop), np.arange(sl["x"].start, sl["x"].stop)]
    omega_pop = sigma[np.ix_(zx, zx)]
    cross_v = sigma[sl["v"], zx]                       # E[V (Z', X')]
    m0 = cross_v @ pinv(omega_pop)

    z_bar_cov = blk("z", "z") - blk("z", "x") @ s_xx_inv @ blk("x", "z")
    m0_z = m0[:, :dz]
    middle = m0_z @ z_bar_cov @ m0_z.T
    mu0 = sigma[sl["x"], zx] @ m0.T @ pinv(middle) @ m0_z

    beta0 = params.beta0.reshape(-1)
    c = sigma[zx, sl["y"]][:, 0] - sigma[np.ix_(zx, np.arange(sl["x"].start, sl["x"].stop))] @ beta0
    b = pinv(omega_pop) @ c
    xi0 = _min_l1_xi(m0, b)

    degenerate = bool(
        numeric_rank(omega_pop, 1e-12) < omega_pop.shape[0]
        or numeric_rank(z_bar_cov, 1e-12) < dz
        or numeric_rank(s_xx, 1e-12) < dx
    )
    return PopulationMoments(sigma, sl, m0, mu0, xi0, omega0, gamma0, degenerate)


def moment_matched_sample(params: DgpParams, n: int | None = None, seed: int = 0) -> SimulatedDataset:
    """Finite sample whose empirical second moments equal the population ones.

    With ``D`` the ones column, ``[D, W, X, Z, V, Y]' [D, W, X, Z, V, Y] / n``
    reproduces the population second-moment matrix exactly, so any estimator
    that depends on the data only through such Gram matrices returns its
    population value.
    """
    sigma, sl = _joint_cov(params)
    k = sigma.shape[0]
    if n is None:
        n = 2 * (k + 1)
    if n < k + 1:
        raise ConfigError(f"need n >= {k + 1} rows for an exact moment match")
    rng = np.random.default_rng(seed)
    basis = np.column_stack([np.ones(n), rng.standard_normal((n, k))])
    q, _ = np.linalg.qr(basis)
    block = np.sqrt(n) * q[:, 1:k + 1] @ sqrt_psd(sigma)
    cols = {name: block[:, s] for name, s in sl.items()}
    data = DataMatrices(cols["y"], cols["x"], cols["z"], cols["v"], np.ones((n, 1)))
    return SimulatedDataset(data, params, cols["w"])
