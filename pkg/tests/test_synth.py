import dataclasses
import warnings

import numpy as np
import pytest

from admatch.core import read_series, treatment_from_series, validate, write_series
from admatch.design import assemble_design, fit_logistic_irls
from admatch.errors import ValidationError
from admatch.impact import stratified_impact
from admatch.matching import nn_match
from admatch.synth import Oracle, SynthSpec, generate, naive_ad, true_satt


def test_same_seed_same_output():
    spec = SynthSpec(n_days=200)
    a, oa = generate(spec, 4)
    b, ob = generate(spec, 4)
    np.testing.assert_array_equal(a.exposure, b.exposure)
    for k in a.outcomes:
        np.testing.assert_array_equal(a.outcomes[k], b.outcomes[k])
        np.testing.assert_array_equal(oa.y1[k], ob.y1[k])
    c, _ = generate(spec, 5)
    assert not np.array_equal(a.exposure, c.exposure)


def test_observed_outcome_bookkeeping():
    s, o = generate(SynthSpec(n_days=300), 1)
    for k, y in s.outcomes.items():
        np.testing.assert_array_equal(y[o.w], o.y1[k][o.w])
        np.testing.assert_array_equal(y[~o.w], o.y0[k][~o.w])
        assert (o.y1[k] >= o.y0[k]).all()
    np.testing.assert_array_equal(o.w, treatment_from_series(s).w)


def test_null_effect():
    s, o = generate(SynthSpec(n_days=300, tau=0.0), 2)
    for k in o.y0:
        np.testing.assert_array_equal(o.y0[k], o.y1[k])
    assert true_satt(o) == 0


def test_zero_confounding_decouples_exposure_from_weather():
    s, _ = generate(SynthSpec(n_days=10_000, confounding=0.0), 3)
    logx = np.log(s.exposure)
    for cov in (s.temperature, s.humidity):
        assert abs(np.corrcoef(logx, cov)[0, 1]) < 0.05
    s, _ = generate(SynthSpec(n_days=10_000, confounding=1.0), 3)
    assert np.corrcoef(np.log(s.exposure), s.temperature)[0, 1] < -0.2


def test_true_satt_examples():
    n = 20
    w = np.arange(n) < 10
    y0 = {("a", "b"): np.full(n, 7)}
    y1 = {("a", "b"): np.full(n, 9)}
    o = Oracle(y0, y1, w, SynthSpec())
    assert true_satt(o) == 20
    assert true_satt(o, w=np.zeros(n, bool)) == 0


def test_true_satt_second_pass():
    _, o = generate(SynthSpec(n_days=400), 6)
    total = 0
    for i in range(400):
        if o.w[i]:
            for k in o.y0:
                total += int(o.y1[k][i]) - int(o.y0[k][i])
    assert true_satt(o) == total


def test_naive_ad():
    assert naive_ad([5, 7, 1, 3], [1, 1, 0, 0]) == pytest.approx(2 * (6 - 2))


def test_export_roundtrip(tmp_path):
    s, _ = generate(SynthSpec(n_days=120), 8)
    p = tmp_path / "synth.csv"
    write_series(s, p)
    back = validate(read_series(p))
    np.testing.assert_array_equal(back.exposure, s.exposure)
    np.testing.assert_array_equal(back.temperature, s.temperature)
    np.testing.assert_array_equal(back.holiday, s.holiday)
    for k in s.outcomes:
        np.testing.assert_array_equal(back.outcomes[k], s.outcomes[k])


def test_spec_validation():
    with pytest.raises(ValidationError):
        generate(SynthSpec(n_days=5))
    with pytest.raises(ValidationError):
        SynthSpec(causes={"a": 0.5, "b": 0.4}).check()
    with pytest.raises(ValidationError):
        SynthSpec.from_dict({"n_days": 100, "bogus": 1})
    assert SynthSpec.from_dict({"tau": 2.0}).tau == 2.0


def _estimate(series):
    a = treatment_from_series(series)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_logistic_irls(a.w, assemble_design(series, a))
    m = nn_match(fit.e_hat, a.w)
    return stratified_impact(series, m, fit.e_hat, a.w).total.ad_hat, a.w


@pytest.mark.slow
def test_consistency_without_confounding():
    spec = SynthSpec(n_days=5000, confounding=0.0)
    est, naive, truth = [], [], []
    for seed in range(50):
        s, o = generate(spec, seed)
        ad, w = _estimate(s)
        est.append(ad)
        naive.append(naive_ad(s.outcome(), w))
        truth.append(true_satt(o))
    t = np.mean(truth)
    assert abs(np.mean(est) - t) / t < 0.10
    assert abs(np.mean(naive) - t) / t < 0.10
