import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rtestim.baselines import (
    EpiEstimConfig,
    Z95,
    conjugate_window,
    epiestim,
    epiestim_uncertain,
    generation_draws,
    glm_poisson_mimic,
    glm_quasipoisson_mimic,
    glm_window,
    renewal_sums,
    write_estimates,
)
from rtestim.delays import ContinuousDelay, DiscretizedDelay, discretize


@pytest.fixture
def gen():
    return DiscretizedDelay(np.array([0.5, 0.3, 0.2]), 1)


# ---- conjugate update ------------------------------------------------------


def test_conjugate_update_example():
    e = conjugate_window(5, 10, 5, 1.0, 5.0)
    assert e.posterior_shape == 11 and e.posterior_rate == pytest.approx(5.2)
    assert e.mean == pytest.approx(11 / 5.2)
    assert e.mean == pytest.approx(2.1154, abs=5e-5)
    assert e.median == pytest.approx(stats.gamma.median(11, scale=1 / 5.2), rel=1e-12)
    assert e.lower95 == pytest.approx(stats.gamma.ppf(0.025, 11, scale=1 / 5.2), rel=1e-12)


def test_conjugate_zero_cases():
    e = conjugate_window(5, 0, 5, 1.0, 5.0)
    assert (e.posterior_shape, e.posterior_rate) == (1, pytest.approx(5.2))
    assert e.mean == pytest.approx(0.1923, abs=5e-5)


def test_conjugate_zero_lambda_missing():
    assert conjugate_window(3, 4, 0.0).missing


def test_epiestim_fixed_point_with_diffuse_prior(gen):
    # incidence growing so that I_t = Lambda_t exactly for t >= 4
    inc = np.zeros(40)
    inc[:3] = [4000.0, 4000.0, 4000.0]
    for t in range(3, 40):
        inc[t] = np.dot(gen.weights, inc[t - 3 : t][::-1])
    lam = renewal_sums(inc, gen)
    np.testing.assert_allclose(inc[3:], lam[3:], rtol=1e-12)
    est = epiestim(inc, EpiEstimConfig(gen, window=1, prior_shape=1.0, prior_scale=1e6))
    for e in est[3:]:
        assert abs(e.mean - 1.0) < 1e-3


def test_epiestim_missing_early_windows(gen):
    inc = np.array([10.0, 12, 15, 20, 22, 30])
    est = epiestim(inc, EpiEstimConfig(gen, window=3))
    assert [e.missing for e in est] == [True, True, True, False, False, False]
    lam = renewal_sums(inc, gen)
    e = est[4]
    assert e.posterior_shape == 1 + inc[2:5].sum()
    assert e.posterior_rate == pytest.approx(0.2 + lam[2:5].sum())


def test_renewal_sums_by_hand(gen):
    inc = np.array([1.0, 2.0, 4.0, 8.0])
    np.testing.assert_allclose(renewal_sums(inc, gen), [0, 0.5, 1.3, 2.8])


def test_epiestim_config_validation(gen):
    with pytest.raises(ValueError):
        EpiEstimConfig(gen, window=0)
    with pytest.raises(ValueError):
        EpiEstimConfig(gen, prior_scale=0)
    with pytest.raises(ValueError):
        EpiEstimConfig(DiscretizedDelay(np.array([0.5, 0.5]), 0))


# ---- Poisson and quasi-Poisson GLM mimics -------------------------------------


def test_glm_poisson_example():
    e = glm_window(4, [5, 10, 15, 20], [5, 10, 15, 20])
    assert e.point_estimate == 1.0
    assert e.std_error == pytest.approx(math.sqrt(1 / 50))
    assert e.std_error == pytest.approx(0.1414, abs=5e-5)
    assert e.lower95 == pytest.approx(1 - Z95 * math.sqrt(1 / 50))


def test_glm_poisson_ratio():
    assert glm_window(2, [30, 30], [10, 20]).point_estimate == 2.0


def test_glm_poisson_all_zero_degenerate():
    e = glm_window(2, [0, 0], [10, 20])
    assert e.point_estimate == 0 and e.std_error == 0 and e.degenerate


def test_glm_score_equation_solved():
    rng = np.random.default_rng(0)
    inc, lam = rng.integers(1, 50, 6).astype(float), rng.uniform(1, 40, 6)
    beta = glm_window(6, inc, lam).point_estimate
    assert np.sum(inc / beta - lam) == pytest.approx(0.0, abs=1e-9)


def test_quasi_example():
    e = glm_window(2, [12, 18], [10, 20], quasi=True)
    assert e.point_estimate == 1.0
    assert e.dispersion == pytest.approx(0.6)
    assert e.std_error == pytest.approx(math.sqrt(0.6) * math.sqrt(1 / 30))


def test_quasi_exact_fit_zero_dispersion():
    e = glm_window(3, [20, 40, 60], [10, 20, 30], quasi=True)
    assert e.dispersion == 0.0


def test_quasi_zero_beta_missing():
    e = glm_window(2, [0, 0], [10, 20], quasi=True)
    assert e.missing and e.degenerate


def test_quasi_overdispersed_wider():
    rng = np.random.default_rng(1)
    lam = rng.uniform(50, 150, 12)
    kappa = 5.0
    inc = rng.negative_binomial(kappa, kappa / (kappa + 1.2 * lam))
    p = glm_window(12, inc, lam)
    q = glm_window(12, inc, lam, quasi=True)
    assert q.dispersion > 5
    assert q.upper95 - q.lower95 > p.upper95 - p.lower95


def test_quasi_needs_window_two(gen):
    with pytest.raises(ValueError):
        glm_quasipoisson_mimic(np.ones(5), 1, gen)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(0, 5000), min_size=6, max_size=20),
    st.integers(2, 5),
)
def test_glm_properties(counts, window):
    gen = DiscretizedDelay(np.array([0.4, 0.35, 0.25]), 1)
    inc = np.array(counts, dtype=float)
    pois = glm_poisson_mimic(inc, window, gen)
    quasi = glm_quasipoisson_mimic(inc, window, gen)
    epi = epiestim(inc, EpiEstimConfig(gen, window=window, prior_shape=1.0, prior_scale=1e6))
    for p, q, e in zip(pois, quasi, epi):
        assert p.missing == e.missing
        if p.missing:
            continue
        if not q.missing:
            assert q.point_estimate == p.point_estimate
            assert q.upper95 - q.lower95 == pytest.approx(
                (p.upper95 - p.lower95) * math.sqrt(q.dispersion), rel=1e-12, abs=1e-12
            )
        i_sum = e.posterior_shape - 1.0
        if i_sum >= 1000:
            # the prior adds one pseudo-case, so agreement needs large windows
            assert e.mean == pytest.approx(p.point_estimate, rel=1e-3)


def test_epiestim_glm_agreement_diffuse_prior(gen):
    rng = np.random.default_rng(2)
    inc = rng.integers(2000, 4000, 15).astype(float)
    pois = glm_poisson_mimic(inc, 4, gen)
    epi = epiestim(inc, EpiEstimConfig(gen, window=4, prior_scale=1e6))
    checked = 0
    for p, e in zip(pois, epi):
        if not p.missing:
            assert e.mean == pytest.approx(p.point_estimate, rel=1e-3)
            checked += 1
    assert checked == 11


# ---- uncertain generation time --------------------------------------------


def test_uncertain_single_draw_matches_plain(gen):
    inc = np.array([10.0, 12, 15, 20, 22, 30, 28])
    plain = epiestim(inc, EpiEstimConfig(gen, window=2))
    mix = epiestim_uncertain(inc, [gen], window=2)
    for a, b in zip(plain, mix):
        assert a.missing == b.missing
        if not a.missing:
            assert b.median == pytest.approx(a.median, rel=1e-9)
            assert b.lower95 == pytest.approx(a.lower95, rel=1e-9)


def test_uncertain_mixture_widens(gen):
    inc = np.array([100.0, 120, 150, 200, 220, 300, 280, 350])
    gens = [
        discretize(d, 10)
        for d in generation_draws(ContinuousDelay.gamma(4.0, 2.0), 20, 0.3, np.random.default_rng(0))
    ]
    mix = epiestim_uncertain(inc, gens, window=1)
    one = epiestim(inc, EpiEstimConfig(gens[0], window=1))
    widths = [m.upper95 - m.lower95 for m in mix[1:]]
    assert all(w > 0 for w in widths)
    assert np.mean(widths) > np.mean([o.upper95 - o.lower95 for o in one[1:]])
    for m in mix[1:]:
        assert m.lower95 <= m.median <= m.upper95


def test_generation_draws_keep_family():
    base = ContinuousDelay.hypoexponential(1 / 4, 1 / 7.5)
    draws = generation_draws(base, 50, 0.2, np.random.default_rng(3))
    assert all(d.family == "hypoexponential" for d in draws)
    ratios = np.array([d.mean() / base.mean() for d in draws])
    assert abs(np.log(ratios).std() - 0.2) < 0.06
    assert generation_draws(base, 3, 0.0, np.random.default_rng(0))[0].mean() == pytest.approx(base.mean())


def test_write_estimates_csv(tmp_path, gen):
    est = glm_quasipoisson_mimic(np.array([10.0, 12, 15, 20, 22]), 2, gen)
    write_estimates(est, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["t_end", "median", "lower95", "upper95", "dispersion"]
    assert rows[1] == ["1", "", "", "", ""]
    assert float(rows[-1][1]) == est[-1].median
