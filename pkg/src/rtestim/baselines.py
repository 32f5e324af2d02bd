"""Analytic renewal-equation baselines.

Each estimator treats the observed case counts as incidence, computes the
renewal sums ``Lambda_t = sum_{u<t} I_u g_{t-u}`` from the observed history
only, and returns one :class:`WindowEstimate` per time step.  Time steps
whose window reaches back before ``t = 2`` (no history) or has
``sum Lambda = 0`` carry missing values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .data import ObservedSeries
from .delays import ContinuousDelay, DiscretizedDelay, convolution_matrix

Z95 = stats.norm.ppf(0.975)


@dataclass(frozen=True)
class EpiEstimConfig:
    generation: DiscretizedDelay
    window: int = 1
    prior_shape: float = 1.0
    prior_scale: float = 5.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.prior_shape <= 0 or self.prior_scale <= 0:
            raise ValueError("prior shape and scale must be positive")
        if self.generation.offset != 1:
            raise ValueError("generation weights must start at lag 1")


@dataclass(frozen=True)
class WindowEstimate:
    """Estimate for the window ending at ``t_end`` (1-based)."""

    t_end: int
    median: float = math.nan
    lower95: float = math.nan
    upper95: float = math.nan
    posterior_shape: float = math.nan
    posterior_rate: float = math.nan
    point_estimate: float = math.nan
    std_error: float = math.nan
    dispersion: float = math.nan
    degenerate: bool = False

    @property
    def missing(self):
        return not math.isfinite(self.median)

    @property
    def mean(self):
        if math.isfinite(self.posterior_shape):
            return self.posterior_shape / self.posterior_rate
        return self.point_estimate


def _incidence(series):
    if isinstance(series, ObservedSeries):
        return series.cases.astype(float)
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or np.any(x < 0):
        raise ValueError("incidence must be a non-negative vector")
    return x


def renewal_sums(incidence, generation: DiscretizedDelay):
    """``Lambda_t`` for ``t = 1..T`` using the observed history only."""
    incidence = np.asarray(incidence, dtype=float)
    G = convolution_matrix(generation, incidence.size, 1)[:, 1:]
    return G @ incidence


def _windows(T, window):
    """Yield ``(t_end, slice)`` for every defined window (1-based t)."""
    for t_end in range(1, T + 1):
        first = t_end - window + 1
        if first < 2:
            yield t_end, None
        else:
            yield t_end, slice(first - 1, t_end)


def conjugate_window(t_end, i_sum, l_sum, prior_shape=1.0, prior_scale=5.0):
    """Gamma posterior of R for one window from its incidence and renewal sums."""
    if not l_sum > 0:
        return WindowEstimate(t_end)
    shape = prior_shape + i_sum
    rate = 1.0 / prior_scale + l_sum
    q = stats.gamma.ppf([0.5, 0.025, 0.975], shape, scale=1.0 / rate)
    return WindowEstimate(
        t_end,
        median=float(q[0]),
        lower95=float(q[1]),
        upper95=float(q[2]),
        posterior_shape=float(shape),
        posterior_rate=float(rate),
    )


def epiestim(series, config: EpiEstimConfig):
    """Conjugate gamma posterior of a piecewise-constant R per window."""
    inc = _incidence(series)
    lam = renewal_sums(inc, config.generation)
    out = []
    for t_end, sl in _windows(inc.size, config.window):
        if sl is None:
            out.append(WindowEstimate(t_end))
        else:
            out.append(
                conjugate_window(
                    t_end, inc[sl].sum(), lam[sl].sum(), config.prior_shape, config.prior_scale
                )
            )
    return out


def generation_draws(delay: ContinuousDelay, n, rel_sd, rng):
    """``n`` copies of ``delay`` with time rescaled by log-normal factors.

    Each factor has median 1 and log-scale sd ``rel_sd``, so the mean and
    sd of the generation time move together while the shape is kept.
    """
    if n < 1 or rel_sd < 0:
        raise ValueError("need n >= 1 and rel_sd >= 0")
    factors = np.exp(rel_sd * rng.standard_normal(n))
    return [delay.scale_time(float(f)) for f in factors]


def _mixture_quantile(shapes, rates, q):
    def cdf_gap(x):
        return stats.gamma.cdf(x, shapes, scale=1.0 / rates).mean() - q

    lo = float(np.min(stats.gamma.ppf(q, shapes, scale=1.0 / rates)))
    hi = float(np.max(stats.gamma.ppf(q, shapes, scale=1.0 / rates)))
    if hi - lo <= 1e-12 * max(hi, 1.0):
        return hi
    return optimize.brentq(cdf_gap, lo, hi, xtol=1e-12, rtol=1e-12)


def epiestim_uncertain(series, generations, window=1, prior_shape=1.0, prior_scale=5.0):
    """EpiEstim averaged over a set of generation-time draws.

    Each draw gives a gamma posterior per window; the reported summary is
    that of the equal-weight mixture.  Windows missing under any draw are
    missing.
    """
    generations = list(generations)
    if not generations:
        raise ValueError("need at least one generation-time draw")
    fits = [
        epiestim(series, EpiEstimConfig(g, window, prior_shape, prior_scale)) for g in generations
    ]
    out = []
    for k, t_end in enumerate(e.t_end for e in fits[0]):
        ests = [f[k] for f in fits]
        if any(e.missing for e in ests):
            out.append(WindowEstimate(t_end))
            continue
        shapes = np.array([e.posterior_shape for e in ests])
        rates = np.array([e.posterior_rate for e in ests])
        med, lo, hi = (_mixture_quantile(shapes, rates, q) for q in (0.5, 0.025, 0.975))
        out.append(
            WindowEstimate(
                t_end,
                median=med,
                lower95=lo,
                upper95=hi,
                point_estimate=float(np.mean(shapes / rates)),
            )
        )
    return out


def glm_window(t_end, inc, lam, quasi=False):
    """Identity-link Poisson (or quasi-Poisson) fit of ``inc`` on ``lam`` over one window."""
    inc = np.asarray(inc, dtype=float)
    lam = np.asarray(lam, dtype=float)
    l_sum = lam.sum()
    if not l_sum > 0:
        return WindowEstimate(t_end)
    beta = inc.sum() / l_sum
    se = math.sqrt(beta / l_sum)
    phi = math.nan
    if quasi:
        if beta == 0:
            return WindowEstimate(t_end, point_estimate=0.0, degenerate=True)
        fitted = beta * lam
        pos = fitted > 0
        pearson = float(np.sum((inc[pos] - fitted[pos]) ** 2 / fitted[pos]))
        phi = pearson / (inc.size - 1)
        se *= math.sqrt(phi)
    return WindowEstimate(
        t_end,
        median=beta,
        lower95=beta - Z95 * se,
        upper95=beta + Z95 * se,
        point_estimate=beta,
        std_error=se,
        dispersion=phi,
        degenerate=beta == 0,
    )


def _glm(series, window, generation, quasi):
    if generation.offset != 1:
        raise ValueError("generation weights must start at lag 1")
    if window < 1:
        raise ValueError("window must be >= 1")
    if quasi and window < 2:
        raise ValueError("quasi-Poisson dispersion needs a window of at least 2")
    inc = _incidence(series)
    lam = renewal_sums(inc, generation)
    return [
        WindowEstimate(t_end) if sl is None else glm_window(t_end, inc[sl], lam[sl], quasi)
        for t_end, sl in _windows(inc.size, window)
    ]


def glm_poisson_mimic(series, window, generation: DiscretizedDelay):
    """Identity-link, no-intercept Poisson GLM of incidence on ``Lambda``.

    The MLE over a window is ``sum I / sum Lambda`` and the Wald standard
    error comes from the Fisher information ``sum Lambda / beta``.
    """
    return _glm(series, window, generation, quasi=False)


def glm_quasipoisson_mimic(series, window, generation: DiscretizedDelay):
    """Quasi-Poisson version: Pearson dispersion inflates the standard error."""
    return _glm(series, window, generation, quasi=True)


def _cell(x):
    return "" if not math.isfinite(x) else repr(float(x))


def write_estimates(estimates, path):
    """CSV with ``t_end,median,lower95,upper95,dispersion``; missing cells empty."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_end", "median", "lower95", "upper95", "dispersion"])
        for e in estimates:
            w.writerow(
                [e.t_end, _cell(e.median), _cell(e.lower95), _cell(e.upper95), _cell(e.dispersion)]
            )
