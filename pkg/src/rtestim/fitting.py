"""Fit the renewal models to a series and summarize the posterior."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .baselines import EpiEstimConfig, epiestim
from .data import ObservedSeries
from .diagnostics import Diagnostics, diagnose
from .models import (
    GammaModelConfig,
    ModelSettings,
    NonCenteredWalk,
    ParameterState,
    build_model,
    fill_missing,
)
from .sampler import PosteriorDraws, SamplerConfig, sample

QUANTILES = (0.5, 0.025, 0.975)


@dataclass
class Summary:
    """Posterior median and central 95% interval per time step."""

    labels: list
    median: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray

    @classmethod
    def from_draws(cls, labels, x):
        q = np.quantile(x, QUANTILES, axis=0)
        return cls(list(labels), q[0], q[1], q[2])

    def write_csv(self, path, extra=None):
        extra = extra or {}
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "median", "lower95", "upper95", *extra])
            for i, label in enumerate(self.labels):
                row = [label, repr(float(self.median[i])), repr(float(self.lower95[i])),
                       repr(float(self.upper95[i]))]
                row += [extra[k][i] for k in extra]
                w.writerow(row)


@dataclass
class FitResult:
    settings: ModelSettings
    config: object
    model: object
    draws: PosteriorDraws
    diagnostics: Diagnostics

    @property
    def series(self) -> ObservedSeries:
        return self.config.series

    @property
    def converged(self):
        return self.diagnostics.verdict()[0]

    def _flat(self):
        return self.draws.flat()

    def rt_draws(self):
        m = self.model
        nI = m.n_seed + m.T
        return np.exp(self._flat()[:, nI : nI + m.T])

    def incidence_draws(self):
        m = self.model
        return np.exp(self._flat()[:, m.n_seed : m.n_seed + m.T])

    def rt(self) -> Summary:
        return Summary.from_draws(self.series.labels(), self.rt_draws())

    def incidence(self) -> Summary:
        return Summary.from_draws(self.series.labels(), self.incidence_draws())

    def predictive_draws(self, seed=0):
        """One replicated case series per posterior draw."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        flat = self._flat()
        out = np.empty((flat.shape[0], self.model.T))
        for i, theta in enumerate(flat):
            mu, k = self.model.emission_params(theta)
            out[i] = rng.negative_binomial(k, k / (k + mu))
        return out

    def posterior_predictive(self, seed=0):
        """Predictive summary for cases and the share of observed points covered."""
        s = Summary.from_draws(self.series.labels(), self.predictive_draws(seed))
        obs = self.series.cases
        covered = (obs >= s.lower95) & (obs <= s.upper95)
        return s, float(covered.mean())


def simulation_init(config, epiestim_medians, detection_median):
    """Starting point used for simulated series.

    ``log R`` starts at the (filled) EpiEstim medians and incidence at the
    observed cases divided by the expected per-infection detection, that is
    ``O_t / (rho M_t)`` for the gamma model and ``O_t / alpha`` for the
    normal model, floored at 1.  Scalars start at their prior means.
    """
    model = build_model(config)
    scal = model.prior_mean_scalars()
    if isinstance(config, GammaModelConfig):
        detect = detection_median * model.tests
    else:
        detect = np.full(model.T, scal["alpha"])
    inc = np.maximum(model.cases / detect, 1.0)
    inc = np.concatenate([np.full(model.n_seed, inc[0]), inc])
    r = np.maximum(fill_missing(epiestim_medians), 1e-3)
    return ParameterState.from_natural(inc, r, **scal)


def epiestim_medians(series, generation):
    est = epiestim(series, EpiEstimConfig(generation, window=1))
    return np.array([e.median for e in est])


def fit(
    series: ObservedSeries,
    settings: ModelSettings,
    sampler: SamplerConfig,
    init=None,
    noncentered=None,
):
    """Sample the posterior of ``settings`` bound to ``series``.

    ``init`` is a :class:`ParameterState`, a vector, or ``None`` for the
    default start (EpiEstim medians for R, cases scaled by the prior
    detection for incidence, prior means elsewhere).  With ``noncentered``
    the Rt walk is sampled in standardized increments; returned draws are
    always in the model's own coordinates.  By default the normal model
    (whose small half-normal walk scale creates a funnel) is sampled
    non-centred and the gamma model centred.
    """
    config = settings.bind(series.require_length(2))
    model = build_model(config)
    if noncentered is None:
        noncentered = not isinstance(config, GammaModelConfig)
    if init is None:
        med = epiestim_medians(series, config.generation)
        if isinstance(config, GammaModelConfig):
            p = config.priors
            detection = math.exp(p.mu_rho)
        else:
            detection = None
        init = simulation_init(config, med, detection)
    theta0 = model.pack(init) if isinstance(init, ParameterState) else np.asarray(init, float)
    if noncentered:
        target = NonCenteredWalk(model)
        draws = sample(target, target.to_noncentered(theta0), sampler, names=model.names)
        draws.draws = target.to_centered(draws.draws)
    else:
        draws = sample(model, theta0, sampler, names=model.names)
    return FitResult(settings, config, model, draws, diagnose(draws))
