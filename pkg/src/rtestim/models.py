"""Renewal models for effective reproduction number estimation.

Two models share the same skeleton: seeded incidence before the observation
window, a log random walk for ``R_t``, an autoregressive latent incidence
process and a negative-binomial emission for observed cases.

``GammaModel``
    Latent incidence ``I_t ~ Gamma(shape=R_t * Lambda_t * nu, rate=nu)`` and
    cases ``O_t ~ NegBinom(mean=rho * M_t * D_t, kappa)`` where ``D_t``
    includes incidence at lag 0.  Test volume ``M_t`` enters the emission.

``NormalModel``
    Latent incidence normal around ``R_t * Lambda_t`` and cases
    ``NegBinom(alpha * sum_{s<t} I_s d_{t-s}, phi)`` with variance
    ``y + phi * y^2`` (size ``1/phi``); tests are ignored.

All positive quantities are sampled on the log scale and the log densities
include the log-Jacobian of the exp transform, so ``log_density`` is the
target for a sampler working on the unconstrained vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import special, stats

from . import _kernels
from .data import ObservedSeries
from .delays import (
    ContinuousDelay,
    DiscretizedDelay,
    convolution_matrix,
    discretize_at_step,
)

# --------------------------------------------------------------------------
# priors and configs


@dataclass(frozen=True)
class PriorSet:
    """Hyperparameters of the gamma model.

    ``nu``, ``sigma`` and ``rho`` have log-normal priors given by (mu, sigma)
    on the log scale; ``lambda ~ Exponential(eta)`` (rate); ``kappa`` has a
    normal prior truncated at zero; ``n_seed`` is the number of incidence
    values before the first observation.  ``None`` lets the model config
    derive ``n_seed`` from the generation-time support.
    """

    mu_nu: float = -2.0
    sigma_nu: float = 0.7
    mu_sigma: float = -0.66
    sigma_sigma: float = 0.6
    eta: float = 0.3
    mu_r1: float = 0.0
    sigma_r1: float = 0.75
    mu_rho: float = -11.06
    sigma_rho: float = 0.3
    mu_kappa: float = 59.0
    sigma_kappa: float = 60.0
    n_seed: int | None = None

    def __post_init__(self):
        _check_positive(self, ("sigma_nu", "sigma_sigma", "eta", "sigma_r1", "sigma_rho", "sigma_kappa"))
        if self.n_seed is not None and self.n_seed < 1:
            raise ValueError("n_seed must be >= 1")

    def merge(self, fragment: dict) -> "PriorSet":
        _reject_unknown(type(self), fragment)
        return replace(self, **fragment)


@dataclass(frozen=True)
class NormalPriorSet:
    """Hyperparameters of the normal model.

    ``sigma`` is half-normal (normal truncated at zero) with scale
    ``sigma_sigma`` around ``mu_sigma``; ``psi``, ``alpha`` and ``1/phi`` have
    normal priors restricted to positive values.
    """

    mu_sigma: float = 0.0
    sigma_sigma: float = 0.1
    eta: float = 0.3
    mu_r1: float = 0.0
    sigma_r1: float = 0.2
    mu_psi: float = 10.0
    sigma_psi: float = 2.0
    mu_alpha: float = 0.02
    sigma_alpha: float = 0.05
    mu_inv_phi: float = 10.0
    sigma_inv_phi: float = 5.0
    n_seed: int | None = None

    def __post_init__(self):
        _check_positive(self, ("sigma_sigma", "eta", "sigma_r1", "sigma_psi", "sigma_alpha", "sigma_inv_phi"))
        if self.n_seed is not None and self.n_seed < 1:
            raise ValueError("n_seed must be >= 1")

    def merge(self, fragment: dict) -> "NormalPriorSet":
        _reject_unknown(type(self), fragment)
        return replace(self, **fragment)


def _check_positive(obj, names):
    for name in names:
        if not getattr(obj, name) > 0:
            raise ValueError(f"{name} must be > 0")


def _reject_unknown(cls, d):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")


def default_n_seed(generation: DiscretizedDelay, mass=0.99) -> int:
    return generation.support_length(mass)


@dataclass(frozen=True)
class GammaModelConfig:
    series: ObservedSeries
    generation: DiscretizedDelay
    latent_delay: DiscretizedDelay
    priors: PriorSet = field(default_factory=PriorSet)

    def __post_init__(self):
        self.series.require_length(2)
        if self.generation.offset != 1:
            raise ValueError("generation weights must have offset 1")
        if self.latent_delay.offset != 0:
            raise ValueError("latent-period weights must have offset 0")
        if self.priors.n_seed is None:
            object.__setattr__(
                self, "priors", replace(self.priors, n_seed=default_n_seed(self.generation))
            )

    @property
    def n_seed(self):
        return self.priors.n_seed


@dataclass(frozen=True)
class NormalModelConfig:
    series: ObservedSeries
    generation: DiscretizedDelay
    latent_delay: DiscretizedDelay
    priors: NormalPriorSet = field(default_factory=NormalPriorSet)
    # "sd": sd = psi * mean ; "variance": variance = psi * mean
    dispersion: str = "sd"

    def __post_init__(self):
        self.series.require_length(2)
        if self.generation.offset != 1:
            raise ValueError("generation weights must have offset 1")
        if self.dispersion not in ("sd", "variance"):
            raise ValueError("dispersion must be 'sd' or 'variance'")
        if self.priors.n_seed is None:
            object.__setattr__(
                self, "priors", replace(self.priors, n_seed=default_n_seed(self.generation))
            )

    @property
    def n_seed(self):
        return self.priors.n_seed


# --------------------------------------------------------------------------
# parameter state


@dataclass
class ParameterState:
    """A point in unconstrained coordinates.

    ``log_I`` holds the ``n_seed`` seeded values followed by the ``T``
    observation-period values; ``log_R`` has length ``T``; ``scalars`` maps
    scalar names (``nu``, ``sigma``, ...) to their logs.
    """

    log_I: np.ndarray
    log_R: np.ndarray
    scalars: dict

    def natural(self):
        out = {"I": np.exp(self.log_I), "R": np.exp(self.log_R)}
        out.update({k: float(np.exp(v)) for k, v in self.scalars.items()})
        return out

    @classmethod
    def from_natural(cls, I, R, **scalars):
        I = np.asarray(I, dtype=float)
        R = np.asarray(R, dtype=float)
        if np.any(I <= 0) or np.any(R <= 0) or any(v <= 0 for v in scalars.values()):
            raise ValueError("natural-scale values must be positive")
        return cls(np.log(I), np.log(R), {k: float(np.log(v)) for k, v in scalars.items()})


# --------------------------------------------------------------------------
# shared pieces


def nb_logpmf(y, mu, k):
    """Negative-binomial log pmf with mean ``mu`` and variance ``mu + mu^2/k``."""
    return (
        special.gammaln(y + k)
        - special.gammaln(k)
        - special.gammaln(y + 1.0)
        - k * np.log1p(mu / k)
        + y * (np.log(mu) - np.log(k + mu))
    )


class _RenewalModel:
    """Bookkeeping shared by both models."""

    scalar_names: tuple = ()

    def __init__(self, config):
        self.config = config
        s = config.series
        self.T = len(s)
        self.n_seed = config.n_seed
        self.cases = s.cases.astype(float)
        self.tests = s.tests.astype(float)
        self.G = convolution_matrix(config.generation, self.T, self.n_seed)
        self.dim = self.n_seed + 2 * self.T + len(self.scalar_names)
        self._lgamma_cases = special.gammaln(self.cases + 1.0)
        # with positive incidence, every renewal sum is positive iff each row has weight
        assert np.all(self.G.sum(axis=1) > 0), "generation weights leave a renewal sum empty"

    # layout ---------------------------------------------------------
    @property
    def names(self):
        times = range(-self.n_seed + 1, self.T + 1)
        return (
            [f"log_I[{t}]" for t in times]
            + [f"log_R[{t}]" for t in range(1, self.T + 1)]
            + [f"log_{name}" for name in self.scalar_names]
        )

    def pack(self, state: ParameterState) -> np.ndarray:
        if state.log_I.shape != (self.n_seed + self.T,) or state.log_R.shape != (self.T,):
            raise ValueError(
                f"state dimensions {state.log_I.shape}, {state.log_R.shape} do not match "
                f"n_seed={self.n_seed}, T={self.T}"
            )
        if set(state.scalars) != set(self.scalar_names):
            raise ValueError(f"state scalars must be {self.scalar_names}")
        return np.concatenate(
            [state.log_I, state.log_R, [state.scalars[k] for k in self.scalar_names]]
        ).astype(float)

    def unpack(self, theta) -> ParameterState:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {theta.shape}")
        nI = self.n_seed + self.T
        return ParameterState(
            theta[:nI].copy(),
            theta[nI : nI + self.T].copy(),
            dict(zip(self.scalar_names, map(float, theta[nI + self.T :]))),
        )

    def _check(self, theta):
        theta = np.ascontiguousarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {theta.shape}")
        return theta

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {theta.shape}")
        nI = self.n_seed + self.T
        return theta[:nI], theta[nI : nI + self.T], theta[nI + self.T :]

    def log_density(self, theta) -> float:
        return self.log_density_and_grad(theta)[0]

    def grad(self, theta) -> np.ndarray:
        return self.log_density_and_grad(theta)[1]

    def __call__(self, theta):
        return self.log_density_and_grad(theta)


# --------------------------------------------------------------------------
# gamma model


class GammaModel(_RenewalModel):
    scalar_names = ("nu", "sigma", "rho", "lambda", "kappa")

    def __init__(self, config: GammaModelConfig):
        super().__init__(config)
        self.D = convolution_matrix(config.latent_delay, self.T, self.n_seed)
        self.priors = p = config.priors
        hyper = np.array([
            p.mu_nu, p.sigma_nu, p.mu_sigma, p.sigma_sigma, p.eta, p.mu_r1, p.sigma_r1,
            p.mu_rho, p.sigma_rho, p.mu_kappa, p.sigma_kappa,
        ])
        self.data = (
            self.n_seed, self.T, self.G, self.D, self.cases, self.tests, self._lgamma_cases, hyper
        )
        self.kernel = _kernels.gamma_model

    def latent_means(self, theta):
        """``R_t * Lambda_t`` for each observation time."""
        x, z, _ = self._split(theta)
        return np.exp(z) * (self.G @ np.exp(x))

    def emission_params(self, theta):
        """Negative-binomial means ``rho * M_t * D_t`` and ``kappa``."""
        x, _, sc = self._split(theta)
        return np.exp(sc[2]) * self.tests * (self.D @ np.exp(x)), float(np.exp(sc[4]))

    def log_density_and_grad(self, theta):
        theta = self._check(theta)
        return _kernels.gamma_model(theta, self.data)

    def prior_mean_scalars(self):
        """Prior means of the scalar parameters on the natural scale."""
        p = self.priors
        return {
            "nu": np.exp(p.mu_nu + p.sigma_nu**2 / 2),
            "sigma": np.exp(p.mu_sigma + p.sigma_sigma**2 / 2),
            "rho": np.exp(p.mu_rho + p.sigma_rho**2 / 2),
            "lambda": 1.0 / p.eta,
            "kappa": truncnorm_mean(p.mu_kappa, p.sigma_kappa),
        }


# --------------------------------------------------------------------------
# normal model


class NormalModel(_RenewalModel):
    scalar_names = ("sigma", "psi", "alpha", "inv_phi", "lambda")

    def __init__(self, config: NormalModelConfig):
        super().__init__(config)
        # cases cannot come from same-step incidence in this model
        latent = config.latent_delay
        self.D = convolution_matrix(latent, self.T, self.n_seed)
        cols = np.arange(self.n_seed + self.T)[None, :] - self.n_seed + 1
        lags = np.arange(1, self.T + 1)[:, None] - cols
        self.D = self.D * (lags >= 1)
        self.priors = p = config.priors
        self.dispersion = config.dispersion
        hyper = np.array([
            p.mu_sigma, p.sigma_sigma, p.eta, p.mu_r1, p.sigma_r1, p.mu_psi, p.sigma_psi,
            p.mu_alpha, p.sigma_alpha, p.mu_inv_phi, p.sigma_inv_phi,
        ])
        self.data = (
            self.n_seed, self.T, self.G, self.D, self.cases, self.tests, self._lgamma_cases,
            hyper, self.dispersion == "variance",
        )
        self.kernel = _kernels.normal_model

    def latent_means(self, theta):
        x, z, _ = self._split(theta)
        return np.exp(z) * (self.G @ np.exp(x))

    def emission_params(self, theta):
        x, _, sc = self._split(theta)
        return np.exp(sc[2]) * (self.D @ np.exp(x)), float(np.exp(sc[3]))

    def log_density_and_grad(self, theta):
        theta = self._check(theta)
        return _kernels.normal_model(theta, self.data)

    def prior_mean_scalars(self):
        p = self.priors
        return {
            "sigma": truncnorm_mean(p.mu_sigma, p.sigma_sigma),
            "psi": truncnorm_mean(p.mu_psi, p.sigma_psi),
            "alpha": truncnorm_mean(p.mu_alpha, p.sigma_alpha),
            "inv_phi": truncnorm_mean(p.mu_inv_phi, p.sigma_inv_phi),
            "lambda": 1.0 / p.eta,
        }


class NonCenteredWalk:
    """Sampling target with the Rt random walk in standardized innovations.

    Coordinates match the model's except that ``log R_2..log R_T`` are
    replaced by the walk increments divided by the step sd.  The density
    includes the Jacobian, so draws mapped back with :meth:`to_centered`
    follow the model posterior.
    """

    def __init__(self, model):
        self.model = model
        self.data = model.data
        self.nI = model.n_seed + model.T
        self.T = model.T
        if isinstance(model, GammaModel):
            self.kernel = _kernels.gamma_model_nc
            self.sig_idx = self.nI + self.T + 1
            self.scale = 1.0 / math.sqrt(self.T - 1.0)
        else:
            self.kernel = _kernels.normal_model_nc
            self.sig_idx = self.nI + self.T
            self.scale = 1.0
        self.dim = model.dim

    def __call__(self, theta):
        return self.kernel(np.ascontiguousarray(theta, dtype=float), self.data)

    def to_centered(self, theta):
        theta = np.ascontiguousarray(theta, dtype=float)
        if theta.ndim == 1:
            return _kernels.walk_to_centered(theta, self.nI, self.T, self.sig_idx, self.scale)
        flat = theta.reshape(-1, theta.shape[-1])
        out = np.array([self.to_centered(row) for row in flat])
        return out.reshape(theta.shape)

    def to_noncentered(self, theta):
        theta = np.ascontiguousarray(theta, dtype=float)
        return _kernels.walk_to_noncentered(theta, self.nI, self.T, self.sig_idx, self.scale)


def truncnorm_mean(mu, sd):
    """Mean of Normal(mu, sd^2) truncated to (0, inf)."""
    a = -mu / sd
    return float(stats.truncnorm.mean(a, np.inf, loc=mu, scale=sd))


def build_model(config):
    if isinstance(config, GammaModelConfig):
        return GammaModel(config)
    if isinstance(config, NormalModelConfig):
        return NormalModel(config)
    raise TypeError(f"unsupported config {type(config).__name__}")


def log_posterior_gamma(state: ParameterState, config: GammaModelConfig) -> float:
    model = GammaModel(config)
    return model.log_density(model.pack(state))


def grad_log_posterior_gamma(state: ParameterState, config: GammaModelConfig) -> np.ndarray:
    model = GammaModel(config)
    return model.grad(model.pack(state))


def log_posterior_normal(state: ParameterState, config: NormalModelConfig) -> float:
    model = NormalModel(config)
    return model.log_density(model.pack(state))


def grad_log_posterior_normal(state: ParameterState, config: NormalModelConfig) -> np.ndarray:
    model = NormalModel(config)
    return model.grad(model.pack(state))


# --------------------------------------------------------------------------
# initial values


def initialize_real_data(config, epiestim_medians, detection_prior_median) -> ParameterState:
    """Starting point for real-data fits.

    ``log R`` starts at the EpiEstim posterior medians (missing values are
    forward filled, leading gaps back filled), incidence at
    ``detection_prior_median * O_t`` floored at 1 (seeds copy the first
    observation-period value) and every scalar at its prior mean.
    """
    if not detection_prior_median > 0:
        raise ValueError("detection_prior_median must be positive")
    model = build_model(config)
    T = model.T
    r0 = fill_missing(np.asarray(epiestim_medians, dtype=float))
    if r0.shape != (T,):
        raise ValueError(f"need {T} EpiEstim medians, got {r0.shape}")
    inc = np.maximum(detection_prior_median * model.cases, 1.0)
    inc = np.concatenate([np.full(model.n_seed, inc[0]), inc])
    return ParameterState.from_natural(inc, np.maximum(r0, 1e-3), **model.prior_mean_scalars())


def fill_missing(values):
    """Forward fill NaNs, then back fill any leading NaNs; all-NaN gives ones."""
    v = np.array(values, dtype=float)
    ok = np.isfinite(v)
    if not ok.any():
        return np.ones_like(v)
    idx = np.where(ok, np.arange(v.size), 0)
    np.maximum.accumulate(idx, out=idx)
    v = v[idx]
    first = np.argmax(ok)
    v[:first] = v[first]
    return v


# --------------------------------------------------------------------------
# JSON settings


@dataclass(frozen=True)
class ModelSettings:
    """Series-independent part of a model config, as stored in JSON.

    ``generation`` and ``latent`` are either continuous delays in days
    (discretized at the series step) or explicit weight vectors.
    """

    model: str = "gamma"
    priors: dict = field(default_factory=dict)
    generation: dict = field(
        default_factory=lambda: ContinuousDelay.hypoexponential(1 / 4, 1 / 7.5).to_dict()
    )
    latent: dict = field(default_factory=lambda: ContinuousDelay.exponential(1 / 4).to_dict())
    dispersion: str = "sd"

    def __post_init__(self):
        if self.model not in ("gamma", "normal"):
            raise ValueError("model must be 'gamma' or 'normal'")
        cls = PriorSet if self.model == "gamma" else NormalPriorSet
        _reject_unknown(cls, self.priors)
        for d in (self.generation, self.latent):
            _delay_from_spec(d, 1, 1, 0)  # validates

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d)
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def with_priors(self, fragment: dict) -> "ModelSettings":
        return replace(self, priors={**self.priors, **fragment})

    def bind(self, series: ObservedSeries):
        """Discretize the delays at the series step and build the config."""
        if self.model == "gamma":
            priors = PriorSet().merge(self.priors)
        else:
            priors = NormalPriorSet().merge(self.priors)
        step = series.step_days
        gen = _delay_from_spec(self.generation, len(series), step, 1)
        n_seed = priors.n_seed or default_n_seed(gen)
        length = len(series) + n_seed
        gen = _delay_from_spec(self.generation, length, step, 1)
        lat = _delay_from_spec(self.latent, length, step, 0)
        priors = replace(priors, n_seed=n_seed)
        if self.model == "gamma":
            return GammaModelConfig(series, gen, lat, priors)
        return NormalModelConfig(series, gen, lat, priors, self.dispersion)


def _delay_from_spec(spec, length, step_days, offset):
    if "weights" in spec:
        unknown = set(spec) - {"weights", "offset"}
        if unknown:
            raise ValueError(f"unknown delay fields {sorted(unknown)}")
        d = DiscretizedDelay(np.asarray(spec["weights"], dtype=float), spec.get("offset", offset))
        if d.offset != offset:
            raise ValueError(f"delay offset must be {offset}")
        return d
    return discretize_at_step(ContinuousDelay.from_dict(spec), length, offset, step_days)
