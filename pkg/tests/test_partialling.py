import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxyctl.errors import DimensionError, InvalidInputError
from proxyctl.lasso import constant_columns
from proxyctl.partialling import (
    DataMatrices,
    cv_lasso_penalty,
    fit_lasso_residualizer,
    fit_ols_residualizer,
    fit_residualizers,
    residualize,
)

from conftest import rel_fro


def sample(seed, n=30, dx=1, dz=3, dv=2, dd=3):
    g = np.random.default_rng(seed)
    d = np.column_stack([np.ones(n), g.standard_normal((n, dd - 1))])
    return DataMatrices(g.standard_normal((n, 1)), g.standard_normal((n, dx)),
                        g.standard_normal((n, dz)), g.standard_normal((n, dv)), d)


def test_data_matrices_validation():
    ones = np.ones((4, 1))
    with pytest.raises(InvalidInputError):
        DataMatrices(ones, ones, ones, ones, np.zeros((4, 1)))
    with pytest.raises(DimensionError):
        DataMatrices(np.ones((4, 2)), ones, ones, ones, ones)
    with pytest.raises(DimensionError):
        DataMatrices(ones, np.ones((3, 1)), ones, ones, ones)
    with pytest.raises(InvalidInputError):
        DataMatrices.from_arrays([1.0, np.nan], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0])


def test_ols_ones_gives_column_means(rng):
    h = rng.standard_normal((10, 3))
    fit = fit_ols_residualizer(np.ones((10, 1)), h)
    assert np.allclose(fit.coeffs[0], h.mean(0))


def test_ols_exact_fit(rng):
    r = rng.standard_normal((12, 3))
    b = rng.standard_normal((3, 2))
    fit = fit_ols_residualizer(r, r @ b)
    assert np.allclose(fit.coeffs, b)
    assert np.max(np.abs(fit.residual(r, r @ b))) < 1e-10


def test_ols_duplicate_column_matches_pruned(rng):
    r = rng.standard_normal((15, 3))
    h = rng.standard_normal((15, 2))
    dup = np.column_stack([r, r[:, 1]])
    full = fit_ols_residualizer(dup, h).residual(dup, h)
    coef = np.linalg.solve(r.T @ r, r.T @ h)
    assert np.max(np.abs(full - (h - r @ coef))) < 1e-8


def test_ols_row_mismatch():
    with pytest.raises(DimensionError):
        fit_ols_residualizer(np.ones((3, 1)), np.ones((4, 1)))


def test_demeaning_with_ones_only(rng):
    data = DataMatrices.from_arrays(*(rng.standard_normal((20, k)) for k in (1, 1, 2, 3)))
    res = residualize(data)
    for role in ("y", "x", "z", "v"):
        h = getattr(data, role)
        assert np.allclose(res.hat[role], h - h.mean(0))


def test_linear_in_d_is_zeroed(rng):
    data = sample(0)
    coef = rng.standard_normal((3, 2))
    v = data.d @ coef
    data = DataMatrices(data.y, data.x, data.z, v, data.d)
    res = residualize(data, fit_on=np.arange(15), apply_on=np.arange(15))
    assert np.max(np.abs(res.hat["v"])) < 1e-10


def test_split_matches_two_pass_oracle():
    data = sample(3, n=20)
    fit_rows = np.arange(0, 20, 2)
    apply_rows = np.arange(1, 20, 2)
    res = residualize(data, fit_on=fit_rows, apply_on=apply_rows)
    d_f, d_a = data.d[fit_rows], data.d[apply_rows]
    xd_f = np.hstack([data.x[fit_rows], d_f])
    xd_a = np.hstack([data.x[apply_rows], d_a])
    for role in ("y", "x", "z", "v"):
        h = getattr(data, role)
        coef = np.linalg.solve(d_f.T @ d_f, d_f.T @ h[fit_rows])
        assert np.max(np.abs(res.hat[role] - (h[apply_rows] - d_a @ coef))) < 1e-10
    for role in ("y", "z", "v"):
        h = getattr(data, role)
        coef = np.linalg.solve(xd_f.T @ xd_f, xd_f.T @ h[fit_rows])
        assert np.max(np.abs(res.check[role] - (h[apply_rows] - xd_a @ coef))) < 1e-10


def test_boolean_mask_rows():
    data = sample(4, n=20)
    mask = np.arange(20) < 12
    a = residualize(data, fit_on=mask, apply_on=~mask)
    b = residualize(data, fit_on=np.flatnonzero(mask), apply_on=np.flatnonzero(~mask))
    assert np.array_equal(a.hat["y"], b.hat["y"])


def test_empty_fit_on_rejected():
    with pytest.raises(InvalidInputError):
        residualize(sample(0), fit_on=np.array([], dtype=int))


@given(st.integers(0, 2**32 - 1), st.integers(8, 40), st.integers(1, 4))
def test_orthogonality_and_idempotence(seed, n, dd):
    data = sample(seed, n=n, dd=dd)
    res = residualize(data)
    for role in ("y", "x", "z", "v"):
        h = getattr(data, role)
        scale = np.linalg.norm(data.d) * np.linalg.norm(h)
        assert np.linalg.norm(data.d.T @ res.hat[role]) <= 1e-8 * scale
        again = fit_ols_residualizer(data.d, res.hat[role]).residual(data.d, res.hat[role])
        assert rel_fro(again, res.hat[role]) <= 1e-8
    xd = data.xd
    for role in ("y", "z", "v"):
        scale = np.linalg.norm(xd) * np.linalg.norm(getattr(data, role))
        assert np.linalg.norm(xd.T @ res.check[role]) <= 1e-8 * scale


def test_x_bar_is_zero():
    data = sample(5)
    x_bar = fit_ols_residualizer(data.xd, data.x).residual(data.xd, data.x)
    assert np.max(np.abs(x_bar)) < 1e-10


def test_lasso_residualizer_zero_penalty_is_ols(rng):
    data = sample(6, n=60, dd=4)
    a = fit_lasso_residualizer(data.d, data.z, 0.0)
    b = fit_ols_residualizer(data.d, data.z)
    assert np.max(np.abs(a.coeffs - b.coeffs)) < 1e-6


def test_lasso_residualizer_kkt(rng):
    g = np.random.default_rng(7)
    n = 120
    d = np.column_stack([np.ones(n), g.standard_normal((n, 15))])
    h = d[:, 1:4] @ np.array([1.0, -2.0, 0.5]) + g.standard_normal(n)
    fit = fit_lasso_residualizer(d, h, 30.0)
    r = h - d @ fit.coeffs[:, 0]
    pen_cols = np.flatnonzero(~constant_columns(d))
    xp = d[:, pen_cols] - d[:, pen_cols].mean(0)
    scales = np.sqrt(np.mean(xp**2, axis=0))
    for k, j in enumerate(pen_cols):
        grad = 2 * d[:, j] @ r / scales[k]
        w = fit.coeffs[j, 0]
        if w == 0:
            assert abs(grad) <= 30.0 + 1e-6
        else:
            assert abs(grad - 30.0 * np.sign(w)) <= 1e-6
    assert abs(r.sum()) < 1e-8


def test_lasso_mode_negative_penalty():
    with pytest.raises(InvalidInputError):
        fit_lasso_residualizer(np.ones((5, 1)), np.ones((5, 1)), -1.0)


def test_lasso_mode_residualize_and_cv():
    g = np.random.default_rng(8)
    n = 80
    d = np.column_stack([np.ones(n), g.standard_normal((n, 6))])
    z = d[:, [1]] + 0.3 * g.standard_normal((n, 1))
    data = DataMatrices(g.standard_normal((n, 1)), g.standard_normal((n, 1)), z,
                        g.standard_normal((n, 2)), d)
    pen = cv_lasso_penalty(d, z, seed=1)
    assert pen >= 0
    fits = fit_residualizers(data, mode="lasso", penalties={"gamma_z": pen})
    assert fits.gamma["z"].penalties == (pen,)
    assert fits.gamma["y"].mode == "lasso"
    with pytest.raises(InvalidInputError):
        fit_residualizers(data, mode="ridge")
