import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rtestim.data import ObservedSeries  # noqa: E402
from rtestim.models import ModelSettings, build_model  # noqa: E402


def small_series(T=8, seed=0):
    rng = np.random.default_rng(seed)
    tests = rng.integers(5_000, 20_000, T)
    cases = rng.integers(20, 300, T)
    return ObservedSeries(cases, tests, "weekly", 1)


@pytest.fixture
def series():
    return small_series()


def prior_state(model, rng):
    """A state drawn from the model's generative process (incidence jittered
    around its conditional mean so every term is in a realistic range)."""
    pri = model.priors
    T, n = model.T, model.n_seed
    gamma = type(model).__name__ == "GammaModel"
    if gamma:
        sigma = np.exp(rng.normal(pri.mu_sigma, pri.sigma_sigma))
        step = sigma / np.sqrt(T - 1)
        lam = rng.exponential(1 / pri.eta)
        scal = {
            "nu": np.exp(rng.normal(pri.mu_nu, pri.sigma_nu)),
            "sigma": sigma,
            "rho": np.exp(rng.normal(pri.mu_rho, pri.sigma_rho)),
            "lambda": lam,
            "kappa": abs(rng.normal(pri.mu_kappa, pri.sigma_kappa)) + 0.5,
        }
    else:
        step = abs(rng.normal(pri.mu_sigma, pri.sigma_sigma)) + 1e-3
        lam = rng.exponential(1 / pri.eta)
        scal = {
            "sigma": step,
            "psi": abs(rng.normal(pri.mu_psi, pri.sigma_psi)) + 0.1,
            "alpha": abs(rng.normal(pri.mu_alpha, pri.sigma_alpha)) + 1e-3,
            "inv_phi": abs(rng.normal(pri.mu_inv_phi, pri.sigma_inv_phi)) + 0.1,
            "lambda": lam,
        }
    z = np.empty(T)
    z[0] = rng.normal(pri.mu_r1, pri.sigma_r1)
    for t in range(1, T):
        z[t] = z[t - 1] + rng.normal(0, step)
    seeds = np.maximum(rng.exponential(1 / max(lam, 1e-3), n), 1.0) * 50
    x = np.concatenate([np.log(seeds), np.zeros(T)])
    inc = np.exp(x)
    for t in range(T):
        mean = np.exp(z[t]) * (model.G[t] @ inc)
        inc[n + t] = mean * np.exp(rng.normal(0, 0.2))
    theta = np.concatenate([np.log(inc), z, [np.log(scal[k]) for k in model.scalar_names]])
    return theta


def prior_predictive(kind, rng, T=8):
    """``(model, theta)`` with theta from the prior and the series' cases
    drawn from theta's emission law, so data and state are consistent."""
    template = bind(kind, small_series(T, int(rng.integers(1 << 31))))[1]
    theta = prior_state(template, rng)
    mean, size = template.emission_params(theta)
    cases = rng.negative_binomial(size, size / (size + mean))
    tests = template.config.series.tests
    s = ObservedSeries(np.minimum(cases, tests), tests, "weekly", 1)
    return bind(kind, s)[1], theta


def prior_dict(priors):
    return {k: v for k, v in asdict(priors).items() if k != "n_seed"}


def bind(model="gamma", series_=None, **kw):
    s = series_ if series_ is not None else small_series()
    cfg = ModelSettings(model, **kw).bind(s)
    return cfg, build_model(cfg)
