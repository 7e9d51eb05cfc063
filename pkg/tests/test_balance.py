import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from admatch.balance import (BalanceWarning, Covariate, balance_table, circular_median, circular_median_test,
                             month_to_angle, pct_bias, prop_test, std_diff_post, std_diff_pre, welch_t)
from admatch.matching import MatchMap, nn_match


def test_std_diff_pre_examples():
    assert std_diff_pre([1, 2, 3, 1, 2, 3], [1, 1, 1, 0, 0, 0]) == 0
    assert std_diff_pre([1, 2, 3, 0, 1, 2], [1, 1, 1, 0, 0, 0]) == pytest.approx(1.0, abs=1e-12)
    assert std_diff_pre([1, 2, 3, 0, 1, 2], [0, 0, 0, 1, 1, 1]) == pytest.approx(-1.0, abs=1e-12)


def test_std_diff_zero_variance_warns():
    with pytest.warns(BalanceWarning):
        assert math.isnan(std_diff_pre([1, 1, 1, 1], [1, 1, 0, 0]))


def test_std_diff_post_examples():
    x = np.array([1.0, 2.0, 3.0, 3.0, 1.0, 2.0, 9.0])
    w = np.array([1, 1, 1, 0, 0, 0, 0], bool)
    m = MatchMap(np.array([0, 1, 2]), np.array([4, 5, 3]), 7)
    assert std_diff_post(x, w, m) == 0
    # Matched multiset equal to the full control set reproduces the pre value.
    x2 = np.array([1.0, 2.0, 3.0, 0.0, 5.0, 4.0])
    w2 = np.array([1, 1, 1, 0, 0, 0], bool)
    m2 = MatchMap(np.array([0, 1, 2]), np.array([3, 4, 5]), 6)
    assert std_diff_post(x2, w2, m2) == std_diff_pre(x2, w2)


def test_std_diff_post_counts_multiplicity():
    x = np.array([5.0, 5.0, 0.0, 10.0])
    w = np.array([1, 1, 0, 0], bool)
    m = MatchMap(np.array([0, 1]), np.array([3, 3]), 4)
    sd = math.sqrt((0 + 50) / 2)
    assert std_diff_post(x, w, m) == pytest.approx((5 - 10) / sd)


@pytest.mark.parametrize("pre, post, expected, tol", [
    (0.914, 0.013, 98.6, 0.05),
    (0.456, 0.014, 96.9, 0.05),
    (0.5, 0.5, 0.0, 0.0),
])
def test_pct_bias_examples(pre, post, expected, tol):
    assert abs(pct_bias(pre, post) - expected) <= tol


def test_pct_bias_against_displayed_values():
    assert abs(pct_bias(0.914, 0.013) - 98.5) < 0.15
    assert abs(pct_bias(0.456, 0.014) - 97.0) < 0.15
    assert pct_bias(1.810, 0) == 100.0
    assert math.isnan(pct_bias(0, 0.1))


@given(st.floats(allow_nan=False, allow_infinity=False).filter(lambda d: d != 0))
def test_pct_bias_zero_post_is_100(d):
    assert pct_bias(d, 0.0) == 100.0


def test_welch_examples():
    assert welch_t([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    a = np.zeros(4)
    b = 10 + np.array([1e-3, -1e-3, 2e-3, 0.0])
    assert welch_t(a, b) < 1e-4
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=30), rng.normal(0.5, 2, size=45)
    assert welch_t(x, y) == pytest.approx(welch_t(3 * x - 7, 3 * y - 7), rel=1e-10)


def test_welch_agrees_with_reference():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, y = rng.normal(size=rng.integers(2, 40)), rng.normal(0.3, 3, size=rng.integers(2, 40))
        ref = stats.ttest_ind(x, y, equal_var=False).pvalue
        assert welch_t(x, y) == pytest.approx(ref, rel=1e-9)


def test_prop_test_examples():
    assert prop_test(30, 100, 60, 200) == 1.0
    assert prop_test(128, 1000, 9, 1000) < 1e-6
    assert prop_test(128, 1000, 9, 1000) == prop_test(9, 1000, 128, 1000)
    p = 137 / 2000
    z = (0.128 - 0.009) / math.sqrt(p * (1 - p) * 2 / 1000)
    assert prop_test(128, 1000, 9, 1000) == pytest.approx(2 * stats.norm.sf(z), rel=1e-12)


def test_month_angles():
    np.testing.assert_allclose(month_to_angle([1, 7]), [math.pi / 12, 13 * math.pi / 12])


def test_circular_median_simple():
    assert circular_median([0.1, 0.2, 0.3]) == pytest.approx(0.2)
    # Wraps across zero.
    m = circular_median([2 * math.pi - 0.1, 0.0, 0.1])
    assert min(m, 2 * math.pi - m) < 1e-12


def test_circular_test_examples():
    jan, jul = month_to_angle(np.ones(20)), month_to_angle(np.full(20, 7))
    res = circular_median_test([jan, jul])
    assert res.p_value < 0.001
    months = np.array([1, 2, 2, 3, 5, 8, 11, 12, 12, 4])
    same = circular_median_test([month_to_angle(months), month_to_angle(months)])
    assert same.statistic == pytest.approx(0, abs=1e-12) and same.p_value == pytest.approx(1.0)


def test_circular_test_rotation_invariant():
    rng = np.random.default_rng(8)
    a = month_to_angle(rng.integers(1, 13, 60))
    b = month_to_angle(rng.integers(3, 9, 40))
    base = circular_median_test([a, b]).p_value
    for k in range(1, 12):
        shift = 2 * math.pi * k / 12
        assert circular_median_test([a + shift, b + shift]).p_value == pytest.approx(base, abs=1e-9)


def test_circular_degenerate_flag():
    assert circular_median_test([[1.0, 1.0], [1.0, 1.0, 2.0]]).degenerate


def _covs(rng, n):
    return [
        Covariate("temperature", rng.normal(15, 8, n)),
        Covariate("weekend", rng.random(n) < 2 / 7, "binary"),
        Covariate("month", rng.integers(1, 13, n), "month"),
    ]


def test_balance_table_structure():
    rng = np.random.default_rng(9)
    n = 300
    w = rng.random(n) < 0.4
    e = rng.random(n)
    covs = _covs(rng, n)
    rows = balance_table(e, w, nn_match(e, w), covs)
    assert rows[0].covariate == "propensity_score"
    assert [r.covariate for r in rows[1:]] == [c.name for c in covs]
    # Supplying the score explicitly does not duplicate it.
    with_score = [Covariate("propensity_score", e)] + covs
    assert len(balance_table(e, w, nn_match(e, w), with_score)) == len(with_score)
    for r in rows:
        for p in (r.p_pre, r.p_post):
            assert 0 <= p <= 1


def test_balance_table_self_copy_has_zero_post_differences():
    rng = np.random.default_rng(10)
    nt = 40
    xt = rng.normal(size=nt)
    x = np.concatenate([xt, xt, rng.normal(2, 1, 30)])
    flag = np.concatenate([xt > 0, xt > 0, rng.random(30) < 0.5])
    w = np.r_[np.ones(nt, bool), np.zeros(nt + 30, bool)]
    m = MatchMap(np.arange(nt), np.arange(nt, 2 * nt), len(x))
    rows = balance_table(x, w, m, [Covariate("x", x), Covariate("flag", flag, "binary")])
    assert all(r.delta_post == 0 for r in rows)


def test_null_welch_p_values_are_uniform():
    rng = np.random.default_rng(11)
    p = []
    for _ in range(1000):
        x = rng.normal(size=120)
        w = rng.random(120) < 0.5
        p.append(welch_t(x[w], x[~w]))
    assert stats.kstest(p, "uniform").statistic < 0.1
