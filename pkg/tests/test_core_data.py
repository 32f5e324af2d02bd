import datetime as dt
import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rtestim.data import ObservedSeries, SchemaError, aggregate_weekly, read_series, write_series
from rtestim.delays import (
    ContinuousDelay,
    DiscretizedDelay,
    bin_weights,
    convolution_matrix,
    discretize,
    discretize_at_step,
    weighted_incidence_sum,
)


# ---------------------------------------------------------------- discretize


def test_exponential_offset1_closed_form():
    w = discretize(ContinuousDelay.exponential(1.0), 2, offset=1).weights
    expected = [1 - math.exp(-1.5), math.exp(-1.5) - math.exp(-2.5)]
    np.testing.assert_allclose(w, expected, rtol=0, atol=1e-12)
    # the commonly quoted rounded figures; the second is 0.1410446 exactly
    np.testing.assert_allclose(w, [0.776870, 0.141047], atol=5e-6)


def test_exponential_offset0_closed_form():
    w = discretize(ContinuousDelay.exponential(1.0), 2, offset=0).weights
    expected = [1 - math.exp(-0.5), math.exp(-0.5) - math.exp(-1.5)]
    np.testing.assert_allclose(w, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w, [0.393469, 0.383401], atol=5e-7)


@pytest.mark.parametrize("length", [1, 5, 30])
def test_offset1_sum_telescopes(length):
    d = ContinuousDelay.gamma(2.0, 0.5)
    w = discretize(d, length, 1).weights
    assert w.sum() == pytest.approx(stats.gamma.cdf(length + 0.5, 2.0, scale=2.0), abs=1e-12)


def test_truncation_is_not_renormalized():
    w = discretize(ContinuousDelay.exponential(0.1), 3, 1).weights
    assert w.sum() < 0.5


def test_invalid_delay_parameters():
    with pytest.raises(ValueError):
        ContinuousDelay.exponential(-1.0)
    with pytest.raises(ValueError):
        ContinuousDelay("gamma", {"shape": 1.0})
    with pytest.raises(ValueError):
        ContinuousDelay("cauchy", {"scale": 1.0})
    with pytest.raises(ValueError):
        discretize(ContinuousDelay.exponential(1.0), 0)


def test_hypoexponential_cdf_matches_convolution():
    d = ContinuousDelay.hypoexponential(0.25, 1 / 7.5)
    x = np.array([0.5, 3.0, 10.0, 25.0])
    a, b = 0.25, 1 / 7.5
    ref = 1 - (b * np.exp(-a * x) - a * np.exp(-b * x)) / (b - a)
    np.testing.assert_allclose(d.cdf(x), ref, rtol=1e-12)
    assert d.mean() == pytest.approx(4 + 7.5)


def test_hypoexponential_equal_rates_is_erlang():
    d = ContinuousDelay.hypoexponential(0.5, 0.5)
    x = np.linspace(0.1, 20, 7)
    np.testing.assert_allclose(d.cdf(x), stats.gamma.cdf(x, 2, scale=2.0), rtol=1e-10)


def test_lognormal_from_moments():
    d = ContinuousDelay.from_moments("lognormal", 9.7, 4.6)
    assert d.mean() == pytest.approx(9.7)
    assert d.sd() == pytest.approx(4.6)


def test_weekly_binning_preserves_mass():
    daily = discretize(ContinuousDelay.hypoexponential(0.25, 1 / 7.5), 200, 1)
    weekly = bin_weights(daily, 7, 40)
    assert weekly.weights.sum() == pytest.approx(daily.weights.sum(), abs=1e-12)
    # days 1..10 fold into week 1 (centred bins, mass below week 1 folded up)
    assert weekly.weights[0] == pytest.approx(daily.weights[:10].sum(), abs=1e-15)


def test_discretize_at_step_daily_is_plain():
    d = ContinuousDelay.gamma(3.0, 0.5)
    a = discretize_at_step(d, 10, 1, 1).weights
    b = discretize(d, 10, 1).weights
    np.testing.assert_array_equal(a, b)


families = st.sampled_from(["exponential", "gamma", "lognormal", "weibull", "hypoexponential"])
pos = st.floats(0.05, 20.0)


@st.composite
def delays(draw):
    fam = draw(families)
    if fam == "exponential":
        return ContinuousDelay.exponential(draw(pos))
    if fam == "gamma":
        return ContinuousDelay.gamma(draw(pos), draw(pos))
    if fam == "lognormal":
        return ContinuousDelay.lognormal(draw(st.floats(-3, 4)), draw(st.floats(0.05, 3)))
    if fam == "weibull":
        return ContinuousDelay.weibull(draw(pos), draw(pos))
    return ContinuousDelay.hypoexponential(draw(pos), draw(pos))


@settings(max_examples=1000, deadline=None)
@given(delays(), st.integers(1, 60), st.sampled_from([0, 1]))
def test_weights_nonnegative_and_sum_at_most_one(delay, length, offset):
    w = discretize(delay, length, offset).weights
    assert np.all(w >= 0)
    assert w.sum() <= 1 + 1e-12
    if offset == 1:
        assert w.sum() == pytest.approx(float(delay.cdf(length + 0.5)), abs=1e-12)


# ------------------------------------------------------ weighted incidence sum


def test_weighted_sum_single_term():
    g = DiscretizedDelay([1.0], 1)
    assert weighted_incidence_sum([10.0], g, 1) == 10.0


def test_weighted_sum_hand_example():
    g = DiscretizedDelay([0.6, 0.4], 1)
    # incidence at t-2 = 10 and t-1 = 20
    assert weighted_incidence_sum([10.0, 20.0], g, 2) == pytest.approx(16.0)


def test_weighted_sum_zero_incidence():
    g = DiscretizedDelay([0.5, 0.3], 1)
    assert weighted_incidence_sum(np.zeros(5), g, 4) == 0.0


def test_weighted_sum_offset0_includes_lag0():
    d = DiscretizedDelay([0.5, 0.5], 0)
    assert weighted_incidence_sum([2.0, 4.0], d, 1) == pytest.approx(0.5 * 4 + 0.5 * 2)


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=20), st.floats(0.1, 10))
def test_weighted_sum_is_linear(inc, c):
    g = DiscretizedDelay([0.5, 0.3, 0.1], 1)
    t = len(inc)
    a = weighted_incidence_sum(np.array(inc) * c, g, t)
    b = c * weighted_incidence_sum(inc, g, t)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-9)


def test_convolution_matrix_matches_sum():
    g = DiscretizedDelay([0.5, 0.3, 0.2], 1)
    n, T = 2, 5
    inc = np.arange(1.0, n + T + 1)
    G = convolution_matrix(g, T, n)
    for t in range(1, T + 1):
        assert G[t - 1] @ inc == pytest.approx(weighted_incidence_sum(inc, g, t + n - 1))


def test_discretized_delay_rejects_bad_weights():
    with pytest.raises(ValueError):
        DiscretizedDelay([0.7, 0.6], 1)
    with pytest.raises(ValueError):
        DiscretizedDelay([-0.1, 0.5], 1)
    with pytest.raises(ValueError):
        DiscretizedDelay([0.5], 2)


# ------------------------------------------------------------- series / io


def test_series_invariants():
    with pytest.raises(ValueError):
        ObservedSeries([1, 2], [10], "daily")
    with pytest.raises(ValueError):
        ObservedSeries([-1, 2], [10, 10], "daily")
    with pytest.raises(ValueError):
        ObservedSeries([1, 2], [0, 10], "daily")
    with pytest.raises(ValueError):
        ObservedSeries([11, 2], [10, 10], "daily")
    with pytest.raises(ValueError):
        ObservedSeries([1], [10], "daily").require_length(2)


def test_aggregate_one_week():
    s = ObservedSeries([1] * 7, [10] * 7, "daily")
    w = aggregate_weekly(s)
    assert w.cases.tolist() == [7] and w.tests.tolist() == [70]
    assert w.step == "weekly"


def test_aggregate_drops_partial_week():
    s = ObservedSeries(np.ones(15, int), np.full(15, 10), "daily")
    with pytest.warns(UserWarning):
        w = aggregate_weekly(s)
    assert len(w) == 2


def test_aggregate_zero_cases():
    s = ObservedSeries(np.zeros(14, int), np.full(14, 3), "daily")
    assert aggregate_weekly(s).cases.tolist() == [0, 0]


def test_aggregate_needs_a_week():
    with pytest.raises(ValueError):
        aggregate_weekly(ObservedSeries([1] * 6, [5] * 6, "daily"))


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(50, 100)), min_size=7, max_size=40))
def test_aggregate_preserves_totals(rows):
    cases, tests = map(np.array, zip(*rows))
    s = ObservedSeries(cases, tests, "daily")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = aggregate_weekly(s)
    k = 7 * len(w)
    assert w.cases.sum() == cases[:k].sum()
    assert w.tests.sum() == tests[:k].sum()


def test_csv_roundtrip_dates(tmp_path):
    s = ObservedSeries([3, 4, 5], [100, 100, 120], "weekly", dt.date(2021, 1, 4))
    path = tmp_path / "s.csv"
    write_series(s, path)
    back = read_series(path)
    assert back.step == "weekly"
    assert back.labels() == ["2021-01-04", "2021-01-11", "2021-01-18"]
    np.testing.assert_array_equal(back.cases, s.cases)


def test_csv_daily_dates_inferred():
    text = "date,cases,tests\n2021-01-01,1,10\n2021-01-02,2,10\n"
    assert read_series(io.StringIO(text)).step == "daily"


@pytest.mark.parametrize(
    "text",
    [
        "day,cases,tests\n1,1,10\n2,1,10\n",
        "date,cases,tests\n1,1,10\n2,,10\n",
        "date,cases,tests\n1,-1,10\n2,1,10\n",
        "date,cases,tests\n1,1,10\n",
        "",
    ],
)
def test_csv_schema_errors(text):
    with pytest.raises(SchemaError):
        read_series(io.StringIO(text))
