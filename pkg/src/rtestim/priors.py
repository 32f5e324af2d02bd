"""Prior elicitation for the over-dispersion, detection and generation time.

* :func:`elicit_kappa` fits a negative-binomial regression with a penalized
  cubic B-spline mean to a case series, samples it with NUTS and matches a
  zero-truncated normal to the over-dispersion posterior by quantiles.
* :func:`elicit_rho` turns bounds on the overall detected fraction into a
  log-normal prior on the per-test detection rate.
* :func:`match_variant_generation` shortens a generation-time law to a new
  mean while keeping its standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import interpolate, optimize, special, stats

from . import _kernels
from .delays import ContinuousDelay
from .diagnostics import ConvergenceError, diagnose
from .sampler import SamplerConfig, sample

KAPPA_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
Z975 = float(stats.norm.ppf(0.975))


# --------------------------------------------------------------------------
# over-dispersion


def bspline_basis(n, interior_knots=10, degree=3):
    """Design matrix of a clamped B-spline basis on ``n`` equally spaced points."""
    x = np.linspace(0.0, 1.0, n)
    inner = np.linspace(0.0, 1.0, interior_knots + 2)
    knots = np.concatenate([np.zeros(degree), inner, np.ones(degree)])
    return interpolate.BSpline.design_matrix(x, knots, degree).toarray()


@dataclass
class SplineFit:
    """Posterior of the penalized-spline negative-binomial surrogate."""

    basis_degree: int
    knot_count: int
    ridge_penalty: np.ndarray
    dispersion_posterior: np.ndarray
    diagnostics: object = None


def penalty_mixed_form(B):
    """Split ``B @ beta`` under a second-difference penalty into fixed and random parts.

    Returns ``(Xf, Zr)``: ``Xf`` (constant and standardized linear trend in
    the coefficient index) spans the penalty's null space, and
    ``Zr = B U diag(lambda)^(-1/2)`` over the penalized eigenvectors, so a
    random-walk scale ``tau`` on the second differences becomes
    ``tau * Zr @ z`` with independent standard normal ``z``.
    """
    K = B.shape[1]
    D = np.diff(np.eye(K), n=2, axis=0)
    lam, U = np.linalg.eigh(D.T @ D)
    keep = lam > 1e-9 * lam.max()
    Zr = B @ (U[:, keep] / np.sqrt(lam[keep]))
    idx = np.arange(K, dtype=float)
    trend = (idx - idx.mean()) / idx.std()
    Xf = B @ np.column_stack([np.ones(K), trend])
    return Xf, Zr


class _SplineTarget:
    def __init__(self, y, interior_knots, degree, tau_scale, kappa_shape, kappa_rate):
        y = np.asarray(y, dtype=float)
        B = bspline_basis(y.size, interior_knots, degree)
        self.Xf, self.Zr = penalty_mixed_form(B)
        self.p = self.Xf.shape[1]
        self.q = self.Zr.shape[1]
        self.kernel = _kernels.spline_nb_model
        self.data = (
            np.ascontiguousarray(self.Xf),
            np.ascontiguousarray(self.Zr),
            y,
            special.gammaln(y + 1.0),
            math.log(y.mean() + 0.5),
            float(tau_scale),
            float(kappa_shape),
            float(kappa_rate),
        )

    @property
    def K(self):
        """Index of ``log_tau`` in the parameter vector."""
        return self.p + self.q

    def names(self):
        return (
            [f"b[{j}]" for j in range(1, self.p + 1)]
            + [f"z[{j}]" for j in range(1, self.q + 1)]
            + ["log_tau", "log_kappa"]
        )

    def init(self):
        th = np.zeros(self.K + 2)
        th[self.K] = math.log(0.1)
        th[self.K + 1] = math.log(10.0)
        return th


def fit_dispersion_spline(
    cases,
    sampler: SamplerConfig | None = None,
    interior_knots=10,
    degree=3,
    tau_scale=1.0,
    kappa_shape=0.01,
    kappa_rate=0.01,
    check=True,
) -> SplineFit:
    """Sample the spline surrogate and return its over-dispersion posterior.

    Raises :class:`ConvergenceError` (with diagnostics attached) when
    ``check`` is set and the chains fail the R-hat/ESS gate.
    """
    y = np.asarray(cases)
    if y.ndim != 1 or y.size < 20:
        raise ValueError("need at least 20 observations to fit the spline")
    if np.any(y < 0) or np.any(np.mod(y, 1) != 0):
        raise ValueError("cases must be non-negative integers")
    sampler = sampler or SamplerConfig(target_acceptance=0.95)
    target = _SplineTarget(y, interior_knots, degree, tau_scale, kappa_shape, kappa_rate)
    draws = sample(target, target.init(), sampler, names=target.names())
    diag = diagnose(draws)
    if check:
        ok, reasons = diag.verdict()
        if not ok:
            raise ConvergenceError("spline fit did not converge: " + "; ".join(reasons), diag)
    flat = draws.flat()
    return SplineFit(
        basis_degree=degree,
        knot_count=interior_knots,
        ridge_penalty=np.exp(-2.0 * flat[:, target.K]),
        dispersion_posterior=np.exp(flat[:, target.K + 1]),
        diagnostics=diag,
    )


def truncnorm_quantiles(q, mu, sd, lower=0.0):
    """Quantiles of a normal(mu, sd) truncated below at ``lower``."""
    a = (lower - mu) / sd
    return stats.truncnorm.ppf(q, a, np.inf, loc=mu, scale=sd)


def match_truncnorm(samples, quantiles=KAPPA_QUANTILES, cap=None):
    """``(mu, sd)`` of a zero-truncated normal closest in quantiles to ``samples``.

    Minimizes the summed squared quantile differences by Nelder-Mead over
    ``(mu, log sd)``.  When ``cap`` is given the returned ``mu`` is capped.
    """
    q = np.asarray(quantiles, dtype=float)
    target = np.quantile(np.asarray(samples, dtype=float), q)

    def loss(p):
        return float(np.sum((target - truncnorm_quantiles(q, p[0], math.exp(p[1]))) ** 2))

    spread = max((target[-1] - target[0]) / (2 * Z975), 1e-6 * max(abs(target[2]), 1.0))
    res = optimize.minimize(
        loss,
        [target[2], math.log(spread)],
        method="Nelder-Mead",
        options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000, "maxfev": 8000},
    )
    mu, sd = float(res.x[0]), float(math.exp(res.x[1]))
    if cap is not None and mu > cap:
        mu = float(cap)
    return mu, sd, float(res.fun)


def elicit_kappa(cases, sampler: SamplerConfig | None = None, cap=1000.0, **spline_kw):
    """Elicit ``(mu_kappa, sigma_kappa)`` from a case series.

    Returns the pair and the underlying :class:`SplineFit`.
    """
    fit = fit_dispersion_spline(cases, sampler, **spline_kw)
    mu, sd, _ = match_truncnorm(fit.dispersion_posterior, cap=cap)
    return (mu, sd), fit


# --------------------------------------------------------------------------
# detection rate


@dataclass(frozen=True)
class DetectionPriorSpec:
    overall_low: float
    overall_high: float
    test_quantile: float = 0.5

    def __post_init__(self):
        if not 0 < self.overall_low < self.overall_high <= 1:
            raise ValueError("need 0 < overall_low < overall_high <= 1")
        if not 0 < self.test_quantile < 1:
            raise ValueError("test_quantile must lie in (0, 1)")


def elicit_rho(tests, spec: DetectionPriorSpec):
    """Log-normal ``(mu_rho, sigma_rho)`` such that ``rho * M_q`` has the
    detection prior whose 2.5% and 97.5% quantiles are the given bounds."""
    tests = np.asarray(tests, dtype=float)
    if tests.size == 0 or np.any(tests <= 0):
        raise ValueError("tests must be a non-empty positive vector")
    lo, hi = math.log(spec.overall_low), math.log(spec.overall_high)
    mu_p = 0.5 * (lo + hi)
    sigma_p = (hi - lo) / (2.0 * Z975)
    m_q = float(np.quantile(tests, spec.test_quantile))
    return mu_p - math.log(m_q), sigma_p


def rho_prior_from_median(tests, detection_median, sigma=0.3, test_quantile=0.5):
    """Log-normal detection prior pinned by its median overall detection."""
    if not 0 < detection_median <= 1:
        raise ValueError("detection median must lie in (0, 1]")
    m_q = float(np.quantile(np.asarray(tests, dtype=float), test_quantile))
    return math.log(detection_median) - math.log(m_q), float(sigma)


# --------------------------------------------------------------------------
# generation time


def _free_params(delay: ContinuousDelay):
    names = list(delay.params)
    x = [v if n == "meanlog" else math.log(v) for n, v in delay.params.items()]
    return names, np.array(x)


def _from_free(family, names, x):
    return ContinuousDelay(
        family, {n: (v if n == "meanlog" else math.exp(v)) for n, v in zip(names, x)}
    )


def sample_moments(delay: ContinuousDelay, n=100_000, seed=20220701):
    """Method-of-moments mean and sd from ``n`` draws with a fixed seed."""
    x = delay.sample(np.random.default_rng(seed), n)
    return float(np.mean(x)), float(np.std(x, ddof=1))


def match_variant_generation(
    base: ContinuousDelay,
    mean_reduction,
    n=100_000,
    seed=20220701,
    base_mean=None,
    base_sd=None,
    mean_tol=0.01,
    sd_tol=0.02,
):
    """Search ``base``'s family for a law with mean ``(1 - r) * mean(base)``
    and the same standard deviation.

    Candidate moments are sample estimates from ``n`` draws with a fixed
    seed, so every candidate shares its random numbers.  ``base_mean`` and
    ``base_sd`` default to the analytic moments of ``base``.
    """
    if not 0 <= mean_reduction < 1:
        raise ValueError("mean_reduction must lie in [0, 1)")
    target_mean = (1.0 - mean_reduction) * (base.mean() if base_mean is None else base_mean)
    target_sd = base.sd() if base_sd is None else base_sd
    names, x0 = _free_params(base)

    def loss(x):
        try:
            cand = _from_free(base.family, names, x)
        except ValueError:
            return np.inf
        m, s = sample_moments(cand, n, seed)
        if not (np.isfinite(m) and np.isfinite(s)):
            return np.inf
        return (m - target_mean) ** 2 + (s - target_sd) ** 2

    res = optimize.minimize(
        loss, x0, method="Nelder-Mead", options={"xatol": 1e-7, "fatol": 1e-12, "maxiter": 2000}
    )
    best = _from_free(base.family, names, res.x)
    m, s = sample_moments(best, n, seed)
    if abs(m - target_mean) > mean_tol * target_mean or abs(s - target_sd) > sd_tol * target_sd:
        raise RuntimeError(
            f"moment matching failed: best candidate {best.to_dict()} has mean {m:.4f} "
            f"(target {target_mean:.4f}) and sd {s:.4f} (target {target_sd:.4f})"
        )
    return best


def default_base_generation():
    """Log-normal generation time with mean 9.7 days and sd 4.6 days."""
    return ContinuousDelay.from_moments("lognormal", 9.7, 4.6)


# --------------------------------------------------------------------------
# output


def prior_fragment(**fields):
    """JSON-ready dict of prior fields, floats rounded through ``repr``."""
    return {k: float(v) for k, v in sorted(fields.items())}


def write_fragment(fragment, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fragment, fh, indent=2, sort_keys=True)
        fh.write("\n")
