import json
import math

import numpy as np
import pytest
from oracles import central_gradient, nb_logpmf
from scipy import stats

from rtestim.delays import ContinuousDelay
from rtestim.diagnostics import ConvergenceError
from rtestim.priors import (
    KAPPA_QUANTILES,
    DetectionPriorSpec,
    _SplineTarget,
    bspline_basis,
    default_base_generation,
    elicit_kappa,
    elicit_rho,
    fit_dispersion_spline,
    match_truncnorm,
    match_variant_generation,
    penalty_mixed_form,
    prior_fragment,
    rho_prior_from_median,
    sample_moments,
    truncnorm_quantiles,
    write_fragment,
)
from rtestim.sampler import SamplerConfig


def smooth_nb_cases(rng, n=40, kappa=5.0):
    x = np.linspace(0, 1, n)
    mu = 60 * np.exp(np.sin(5 * x))
    return rng.negative_binomial(kappa, kappa / (kappa + mu))


# ---- spline surrogate ------------------------------------------------------


def test_bspline_partition_of_unity():
    B = bspline_basis(30, interior_knots=10, degree=3)
    assert B.shape == (30, 14)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(B >= 0)


def test_mixed_form_whitens_penalty():
    B = bspline_basis(40)
    Xf, Zr = penalty_mixed_form(B)
    D = np.diff(np.eye(B.shape[1]), n=2, axis=0)
    coef_f = np.linalg.lstsq(B, Xf, rcond=None)[0]
    coef_r = np.linalg.lstsq(B, Zr, rcond=None)[0]
    # the fixed part is unpenalized and the random part has identity penalty
    np.testing.assert_allclose(D @ coef_f, 0.0, atol=1e-9)
    np.testing.assert_allclose((D @ coef_r).T @ (D @ coef_r), np.eye(Zr.shape[1]), atol=1e-8)
    assert Xf.shape[1] + Zr.shape[1] == B.shape[1]


def spline_oracle(theta, tg, y):
    Xf, Zr, _, _, offset, tau_scale, a, b = tg.data
    p, q = tg.p, tg.q
    tau, kappa = math.exp(theta[p + q]), math.exp(theta[p + q + 1])
    mu = np.exp(offset + Xf @ theta[:p] + tau * Zr @ theta[p : p + q])
    lp = sum(nb_logpmf(yi, mi, kappa) for yi, mi in zip(y, mu))
    lp += stats.norm.logpdf(theta[:p], 0, 5).sum() + stats.norm.logpdf(theta[p : p + q]).sum()
    lp += stats.halfnorm.logpdf(tau, scale=tau_scale) + theta[p + q]
    lp += stats.gamma.logpdf(kappa, a, scale=1 / b) + theta[p + q + 1]
    return lp


@pytest.mark.parametrize("seed", range(4))
def test_spline_kernel_value_and_gradient(seed):
    rng = np.random.default_rng(seed)
    y = smooth_nb_cases(rng, 30)
    tg = _SplineTarget(y, 10, 3, 1.0, 0.01, 0.01)
    theta = tg.init() + 0.3 * rng.standard_normal(tg.K + 2)
    lp, g = tg.kernel(theta, tg.data)
    assert lp == pytest.approx(spline_oracle(theta, tg, y), rel=1e-10)
    num = central_gradient(lambda t: spline_oracle(t, tg, y), theta)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-6)


def test_spline_input_validation():
    with pytest.raises(ValueError, match="20"):
        fit_dispersion_spline(np.arange(10))
    with pytest.raises(ValueError):
        fit_dispersion_spline(np.full(25, 1.5))


def test_elicit_kappa_recovers_true_dispersion():
    y = smooth_nb_cases(np.random.default_rng(5))
    (mu, sd), fit = elicit_kappa(y, SamplerConfig(seed=0, target_acceptance=0.95))
    assert fit.diagnostics.verdict()[0]
    assert np.all(fit.dispersion_posterior > 0)
    assert fit.basis_degree == 3 and fit.knot_count == 10
    lo, hi = truncnorm_quantiles([0.025, 0.975], mu, sd)
    assert lo < 5.0 < hi


def test_elicit_kappa_constant_cases_hits_cap():
    # without extra-Poisson spread only the weak gamma prior bounds kappa
    y = np.full(30, 200)
    (mu, sd), fit = elicit_kappa(
        y, SamplerConfig(chains=2, iterations=600, warmup=300, seed=0), cap=100.0, check=False
    )
    assert np.median(fit.dispersion_posterior) > 100.0
    assert mu == 100.0


def test_spline_nonconvergence_raises_with_diagnostics():
    y = smooth_nb_cases(np.random.default_rng(1))
    with pytest.raises(ConvergenceError) as err:
        fit_dispersion_spline(y, SamplerConfig(chains=2, iterations=30, warmup=15, seed=0))
    assert err.value.diagnostics is not None


# ---- truncated-normal quantile matching -------------------------------------


def test_truncnorm_quantiles_closed_form():
    mu, sd = 3.0, 4.0
    a = stats.norm.cdf(-mu / sd)
    q = np.array(KAPPA_QUANTILES)
    expected = mu + sd * stats.norm.ppf(a + q * (1 - a))
    np.testing.assert_allclose(truncnorm_quantiles(q, mu, sd), expected, rtol=1e-10)


@pytest.mark.parametrize("mu,sd", [(33.0, 25.0), (5.0, 2.0), (59.0, 60.0)])
def test_match_truncnorm_recovers_parameters(mu, sd):
    a = -mu / sd
    x = stats.truncnorm.ppf(np.linspace(0.5 / 20000, 1 - 0.5 / 20000, 20000), a, np.inf, loc=mu, scale=sd)
    m, s, loss = match_truncnorm(x)
    assert m == pytest.approx(mu, rel=0.01)
    assert s == pytest.approx(sd, rel=0.01)
    assert loss < 1e-2


def test_match_truncnorm_beats_random_candidates():
    rng = np.random.default_rng(0)
    x = rng.gamma(4.0, 3.0, 4000)
    m, s, loss = match_truncnorm(x)
    target = np.quantile(x, KAPPA_QUANTILES)
    for _ in range(20):
        cm, cs = rng.uniform(0.1, 40), rng.uniform(0.1, 30)
        cand = np.sum((target - truncnorm_quantiles(np.array(KAPPA_QUANTILES), cm, cs)) ** 2)
        assert loss <= cand


def test_match_truncnorm_cap():
    x = np.random.default_rng(1).normal(5000, 100, 2000)
    m, s, _ = match_truncnorm(x, cap=1000.0)
    assert m == 1000.0 and s > 0


# ---- detection prior ---------------------------------------------------------


def test_elicit_rho_example():
    tests = np.array([9_000, 10_000, 11_000])
    mu, sigma = elicit_rho(tests, DetectionPriorSpec(0.025, 0.4))
    assert 0.5 * (math.log(0.025) + math.log(0.4)) == pytest.approx(math.log(0.1), abs=1e-15)
    assert mu == pytest.approx(math.log(0.1) - math.log(1e4), abs=1e-12)
    assert sigma == pytest.approx((math.log(0.4) - math.log(0.025)) / (2 * 1.959963984540054), rel=1e-12)
    # the printed figure 0.7075 is a rounding of the same expression
    assert sigma == pytest.approx(0.7075, abs=5e-4)


@pytest.mark.parametrize("q", [0.25, 0.5])
def test_induced_detection_quantiles_exact(q):
    tests = np.random.default_rng(2).integers(3_000, 30_000, 20)
    spec = DetectionPriorSpec(0.05, 0.3, test_quantile=q)
    mu, sigma = elicit_rho(tests, spec)
    m_q = np.quantile(tests, q)
    lo, hi = stats.lognorm.ppf([0.025, 0.975], sigma, scale=np.exp(mu + math.log(m_q)))
    assert lo == pytest.approx(0.05, abs=1e-12)
    assert hi == pytest.approx(0.3, abs=1e-12)


def test_quarter_quantile_uses_lower_tests():
    tests = np.arange(1, 101) * 100
    mu50, _ = elicit_rho(tests, DetectionPriorSpec(0.05, 0.3))
    mu25, _ = elicit_rho(tests, DetectionPriorSpec(0.05, 0.3, 0.25))
    assert mu25 - mu50 == pytest.approx(math.log(np.quantile(tests, 0.5) / np.quantile(tests, 0.25)))


def test_constant_tests_give_detection_prior():
    c = 7_500
    mu, sigma = elicit_rho(np.full(12, c), DetectionPriorSpec(0.025, 0.4))
    assert mu + math.log(c) == pytest.approx(math.log(0.1), abs=1e-12)


@pytest.mark.parametrize(
    "low,high,q", [(0.4, 0.025, 0.5), (0.0, 0.4, 0.5), (0.1, 1.2, 0.5), (0.1, 0.4, 1.0)]
)
def test_detection_spec_validation(low, high, q):
    with pytest.raises(ValueError):
        DetectionPriorSpec(low, high, q)


def test_elicit_rho_rejects_bad_tests():
    with pytest.raises(ValueError):
        elicit_rho(np.array([]), DetectionPriorSpec(0.1, 0.4))
    with pytest.raises(ValueError):
        elicit_rho(np.array([10, 0]), DetectionPriorSpec(0.1, 0.4))


def test_rho_prior_from_median():
    mu, sigma = rho_prior_from_median(np.full(4, 1e4), 0.066)
    assert mu == pytest.approx(math.log(0.066) - math.log(1e4))
    assert sigma == 0.3
    with pytest.raises(ValueError):
        rho_prior_from_median(np.full(4, 1e4), 1.5)


# ---- variant generation time -------------------------------------------------


@pytest.fixture(scope="module")
def delta():
    return match_variant_generation(default_base_generation(), 0.15)


def test_base_generation_moments():
    b = default_base_generation()
    assert b.mean() == pytest.approx(9.7, rel=1e-12)
    assert b.sd() == pytest.approx(4.6, rel=1e-12)


def test_delta_generation_mean(delta):
    m, s = sample_moments(delta)
    assert 0.85 * 9.7 == pytest.approx(8.245)
    assert m == pytest.approx(8.245, rel=0.01)
    assert s == pytest.approx(4.6, rel=0.02)
    assert delta.family == "lognormal"


def test_omicron_generation_mean():
    base = default_base_generation()
    omicron = match_variant_generation(base, 0.28, base_mean=8.245)
    m, s = sample_moments(omicron)
    assert 8.245 * 0.72 == pytest.approx(5.936, abs=5e-4)
    assert m == pytest.approx(5.936, rel=0.01)
    assert s == pytest.approx(4.6, rel=0.02)


def test_zero_reduction_reproduces_base():
    base = ContinuousDelay.from_moments("gamma", 6.0, 2.5)
    out = match_variant_generation(base, 0.0)
    m, s = sample_moments(out)
    m0, s0 = sample_moments(base)
    # both estimates share seed and draw count, so the noise is common
    assert m == pytest.approx(6.0, rel=0.01) and s == pytest.approx(2.5, rel=0.02)
    assert abs(m - m0) < 0.02 and abs(s - s0) < 0.02


def test_variant_failure_reports_best_candidate():
    with pytest.raises(RuntimeError, match="best candidate"):
        match_variant_generation(ContinuousDelay.exponential(0.2), 0.5)


def test_variant_reduction_validation():
    with pytest.raises(ValueError):
        match_variant_generation(default_base_generation(), 1.0)


def test_sample_moments_deterministic():
    d = default_base_generation()
    assert sample_moments(d, 1000) == sample_moments(d, 1000)


def test_fragment_roundtrip(tmp_path):
    frag = prior_fragment(mu_kappa=np.float64(33.0), sigma_kappa=25)
    write_fragment(frag, tmp_path / "p.json")
    assert json.load(open(tmp_path / "p.json")) == {"mu_kappa": 33.0, "sigma_kappa": 25.0}
