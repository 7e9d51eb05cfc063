import dataclasses
import math
import warnings

import numpy as np
import pytest
from scipy.special import expit

from admatch.core import treatment_from_series
from admatch.design import (INTERCEPT, CubicRegressionSpline, DesignMatrix, DesignSpec, SeparationWarning,
                            ThinPlateSpline1D, assemble_design, binomial_deviance, cubic_spline_basis,
                            fit_logistic_irls, predict_propensity, rank_check, tensor_basis, tprs_basis)
from admatch.errors import RankDeficiencyError, ValidationError


def _lsq_rmse(X, y):
    X1 = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(X1, y, rcond=None)
    return float(np.sqrt(np.mean((X1 @ coef - y) ** 2)))


# -- calendar spline -----------------------------------------------------------

def test_spline_one_year_shape_and_rank():
    B = cubic_spline_basis(np.arange(365), 5, n_years=1)
    assert B.shape == (365, 5)
    assert np.linalg.matrix_rank(B) == 5
    # The constraint keeps the intercept out of the span.
    np.testing.assert_allclose(B.sum(axis=0), 0, atol=1e-8)
    assert np.linalg.matrix_rank(np.column_stack([np.ones(365), B])) == 6


def test_spline_fits_sine():
    t = np.arange(365.0)
    B = cubic_spline_basis(t, 10, n_years=1)
    assert B.shape[1] == 10
    assert _lsq_rmse(B, np.sin(2 * np.pi * t / 365)) < 0.01


def test_spline_second_derivative_continuous_at_knots():
    s = CubicRegressionSpline.from_data(np.arange(730.0), 10)
    h = 1e-3
    for k in s.knots[1:-1]:
        left = (s.basis([k - 2 * h]) - 2 * s.basis([k - h]) + s.basis([k])) / h ** 2
        right = (s.basis([k]) - 2 * s.basis([k + h]) + s.basis([k + 2 * h])) / h ** 2
        assert np.abs(left - right).max() < 1e-4
        # first derivative too, at much finer resolution
        d_left = (s.basis([k]) - s.basis([k - h])) / h
        d_right = (s.basis([k + h]) - s.basis([k])) / h
        assert np.abs(d_left - d_right).max() < 1e-4


def test_spline_cardinal_and_natural():
    s = CubicRegressionSpline([0.0, 1.0, 3.0, 4.0, 7.0])
    np.testing.assert_allclose(s.basis(s.knots), np.eye(5), atol=1e-12)
    np.testing.assert_allclose(s.basis(s.knots[[0, -1]], deriv=2), 0, atol=1e-12)
    # Partition of unity and exact reproduction of linear functions.
    x = np.linspace(-1, 8, 50)
    np.testing.assert_allclose(s.basis(x).sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(s.basis(x) @ s.knots, x, atol=1e-12)


def test_spline_rejects_short_series():
    with pytest.raises(ValueError):
        cubic_spline_basis(np.arange(10), 5, n_years=0.2)
    with pytest.raises(ValueError):
        CubicRegressionSpline([0.0, 0.0, 1.0])


# -- thin plate splines ---------------------------------------------------------

def test_tprs_shape_and_linear_column():
    x = np.linspace(-3, 11, 100)
    B = tprs_basis(x, 5)
    assert B.shape == (100, 4)
    ratio = B[:, -1] / x
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert tprs_basis(x, 5, include_constant=True).shape == (100, 5)


def test_tprs_reproduces_quadratic():
    x = np.linspace(0, 1, 100)
    assert _lsq_rmse(tprs_basis(x, 5), x ** 2) < 1e-3


def test_tprs_interpolates_when_k_equals_n():
    x = np.array([0.0, 0.4, 1.0])
    y = np.array([2.0, -1.0, 5.0])
    B = tprs_basis(x, 3, include_constant=True)
    coef = np.linalg.solve(B, y)
    np.testing.assert_allclose(B @ coef, y, atol=1e-10)


def test_tprs_knot_thinning_and_names():
    x = np.arange(2000.0)
    sp = ThinPlateSpline1D(x, 5, max_knots=500)
    assert len(sp.knots) == 500
    assert sp.names("temp") == ["temp.s1", "temp.s2", "temp.s3", "temp.x"]
    with pytest.raises(ValueError):
        ThinPlateSpline1D(np.array([1.0, 1.0, 2.0]), 3)


def test_tensor_identity_and_entries():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(20, 5))
    B = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(tensor_basis(A, np.ones((20, 1))), A)
    T = tensor_basis(A, B)
    assert T.shape == (20, 15)
    for i in range(5):
        for j in range(3):
            np.testing.assert_array_equal(T[:, i * 3 + j], A[:, i] * B[:, j])
    with pytest.raises(ValueError):
        tensor_basis(A, B[:10])


def test_weather_tensor_has_15_columns_before_constraint():
    rng = np.random.default_rng(1)
    temp, hum = rng.normal(15, 8, 400), rng.uniform(20, 95, 400)
    full = tensor_basis(tprs_basis(temp, 5, include_constant=True), tprs_basis(hum, 3, include_constant=True))
    assert full.shape[1] == 15
    assert np.linalg.matrix_rank(full) == 15


# -- assembly -------------------------------------------------------------------

def test_assemble_design_four_years():
    from admatch.synth import SynthSpec, generate
    series, _ = generate(SynthSpec(n_days=1461), seed=11)
    dm = assemble_design(series)
    assert dm.columns[0] == INTERCEPT
    assert dm.block("time.").shape[1] == 20
    assert dm.block("te(").shape[1] == 14
    assert np.linalg.matrix_rank(dm.values) == dm.n_cols
    again = assemble_design(series)
    np.testing.assert_array_equal(dm.values, again.values)
    assert dm.columns == again.columns


def test_assemble_design_drops_constant_indicator(synth_year, caplog):
    series, _ = synth_year
    cold = dataclasses.replace(series, temperature=np.minimum(series.temperature, 20.0))
    dm = assemble_design(cold)
    assert "heat" in caplog.text
    assert "heat" not in dm.columns and "heat" in dm.dropped


def test_rank_check_names_collinear_columns():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficiencyError) as err:
        rank_check(X, ["a", "b", "c"])
    assert set(err.value.columns) & {"b", "c"}


def test_design_matrix_check():
    with pytest.raises(ValueError):
        DesignMatrix(np.ones((3, 2)), ("a",))
    dm = DesignMatrix(np.column_stack([np.ones(3), np.ones(3)]), (INTERCEPT, "b"))
    with pytest.raises(ValueError):
        dm.check()


# -- IRLS -----------------------------------------------------------------------

def test_intercept_only_fit():
    w = np.r_[np.ones(557), np.zeros(443)]
    fit = fit_logistic_irls(w, np.ones((1000, 1)))
    assert fit.converged
    assert abs(fit.beta[0] - math.log(0.557 / 0.443)) < 1e-6
    assert round(fit.beta[0], 4) == 0.2290


def test_null_slope_within_three_se():
    rng = np.random.default_rng(5)
    n = 2000
    x = rng.normal(size=n)
    w = rng.random(n) < 0.5
    X = np.column_stack([np.ones(n), x])
    fit = fit_logistic_irls(w, X)
    v = fit.e_hat * (1 - fit.e_hat)
    cov = np.linalg.inv(X.T @ (X * v[:, None]))
    assert abs(fit.beta[1]) < 3 * math.sqrt(cov[1, 1])


def test_score_equations_and_monotone_deviance():
    rng = np.random.default_rng(6)
    n = 500
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
    w = rng.random(n) < expit(X @ [0.3, 1.0, -0.5, 0.2])
    fit = fit_logistic_irls(w, X)
    np.testing.assert_allclose(X.T @ (w - fit.e_hat), 0, atol=1e-6)
    assert all(b <= a for a, b in zip(fit.deviance_path, fit.deviance_path[1:]))
    assert fit.deviance == pytest.approx(binomial_deviance(w, X @ fit.beta))


def test_separation_flagged():
    x = np.arange(-10.0, 10.0)
    w = x > 0
    with pytest.warns(SeparationWarning):
        fit = fit_logistic_irls(w, np.column_stack([np.ones(20), x]))
    assert not fit.converged


def test_fit_rejects_degenerate_treatment():
    with pytest.raises(ValidationError):
        fit_logistic_irls(np.ones(5), np.ones((5, 1)))
    with pytest.raises(ValidationError):
        fit_logistic_irls(np.array([0, 1, 2]), np.ones((3, 1)))


def test_predict_propensity():
    from admatch.design import PropensityFit
    fit = PropensityFit(beta=np.zeros(2), e_hat=np.array([]), deviance=0.0, converged=True, n_iter=0)
    np.testing.assert_array_equal(predict_propensity(fit, np.ones((3, 2))), 0.5)
    fit = PropensityFit(beta=np.array([0.2290]), e_hat=np.array([]), deviance=0.0, converged=True, n_iter=0)
    assert predict_propensity(fit, np.ones((1, 1)))[0] == pytest.approx(0.557, abs=5e-6)
    fit = PropensityFit(beta=np.array([100.0]), e_hat=np.array([]), deviance=0.0, converged=True, n_iter=0)
    assert predict_propensity(fit, np.ones((1, 1)))[0] == 1 - 1e-10
    with pytest.raises(ValueError):
        predict_propensity(fit, np.ones((1, 2)))


def test_fit_on_assembled_design(synth_year):
    series, _ = synth_year
    a = treatment_from_series(series)
    dm = assemble_design(series, a)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_logistic_irls(a.w, dm)
    assert fit.columns == dm.columns
    assert ((fit.e_hat > 0) & (fit.e_hat < 1)).all()
