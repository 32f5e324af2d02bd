"""Continuous delay laws and their discretization onto the analysis grid.

Generation-time weights use offset 1 (no mass at lag 0) and latent-period
weights use offset 0.  Discretized weights are truncated at the requested
length and never renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

FAMILIES = ("exponential", "gamma", "lognormal", "weibull", "hypoexponential")

_PARAMS = {
    "exponential": ("rate",),
    "gamma": ("shape", "rate"),
    "lognormal": ("meanlog", "sdlog"),
    "weibull": ("shape", "scale"),
    "hypoexponential": ("rate1", "rate2"),
}


@dataclass(frozen=True)
class ContinuousDelay:
    """A continuous, non-negative delay distribution measured in days.

    Parameters
    ----------
    family : str
        One of ``FAMILIES``.
    params : dict
        Family-specific parameters:

        - exponential: ``rate``
        - gamma: ``shape``, ``rate``
        - lognormal: ``meanlog``, ``sdlog``
        - weibull: ``shape``, ``scale``
        - hypoexponential: ``rate1``, ``rate2`` (sum of two independent
          exponentials)
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _PARAMS:
            raise ValueError(f"unknown delay family {self.family!r}")
        expected = set(_PARAMS[self.family])
        if set(self.params) != expected:
            raise ValueError(
                f"{self.family} delay needs parameters {sorted(expected)}, "
                f"got {sorted(self.params)}"
            )
        for name, value in self.params.items():
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite")
            if name != "meanlog" and value <= 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        # freeze param values as plain floats
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})

    # constructors -----------------------------------------------------
    @classmethod
    def exponential(cls, rate):
        return cls("exponential", {"rate": rate})

    @classmethod
    def gamma(cls, shape, rate):
        return cls("gamma", {"shape": shape, "rate": rate})

    @classmethod
    def lognormal(cls, meanlog, sdlog):
        return cls("lognormal", {"meanlog": meanlog, "sdlog": sdlog})

    @classmethod
    def weibull(cls, shape, scale):
        return cls("weibull", {"shape": shape, "scale": scale})

    @classmethod
    def hypoexponential(cls, rate1, rate2):
        return cls("hypoexponential", {"rate1": rate1, "rate2": rate2})

    @classmethod
    def from_moments(cls, family, mean, sd):
        """Build a delay with the given mean and standard deviation."""
        if mean <= 0 or sd <= 0:
            raise ValueError("mean and sd must be positive")
        if family == "gamma":
            shape = (mean / sd) ** 2
            return cls.gamma(shape, shape / mean)
        if family == "lognormal":
            sdlog2 = np.log1p((sd / mean) ** 2)
            return cls.lognormal(np.log(mean) - sdlog2 / 2, np.sqrt(sdlog2))
        if family == "weibull":
            from scipy.optimize import brentq

            cv = sd / mean

            def gap(k):
                g1 = special.gamma(1 + 1 / k)
                return np.sqrt(special.gamma(1 + 2 / k) - g1**2) / g1 - cv

            shape = brentq(gap, 0.05, 500.0)
            return cls.weibull(shape, mean / special.gamma(1 + 1 / shape))
        if family == "exponential":
            return cls.exponential(1 / mean)
        raise ValueError(f"cannot build {family!r} from two moments")

    # moments and distribution functions --------------------------------
    def _frozen(self):
        p = self.params
        if self.family == "exponential":
            return stats.expon(scale=1 / p["rate"])
        if self.family == "gamma":
            return stats.gamma(p["shape"], scale=1 / p["rate"])
        if self.family == "lognormal":
            return stats.lognorm(p["sdlog"], scale=np.exp(p["meanlog"]))
        if self.family == "weibull":
            return stats.weibull_min(p["shape"], scale=p["scale"])
        return None

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family != "hypoexponential":
            return self._frozen().cdf(x)
        a, b = self.params["rate1"], self.params["rate2"]
        xp = np.clip(x, 0.0, None)
        if np.isclose(a, b, rtol=1e-9, atol=0.0):
            # Erlang(2, a)
            out = 1.0 - np.exp(-a * xp) * (1.0 + a * xp)
        else:
            out = 1.0 - (b * np.exp(-a * xp) - a * np.exp(-b * xp)) / (b - a)
        return np.where(x > 0, out, 0.0)

    def mean(self):
        if self.family == "hypoexponential":
            return 1 / self.params["rate1"] + 1 / self.params["rate2"]
        return float(self._frozen().mean())

    def sd(self):
        if self.family == "hypoexponential":
            return float(np.sqrt(self.params["rate1"] ** -2 + self.params["rate2"] ** -2))
        return float(self._frozen().std())

    def sample(self, rng, size):
        if self.family == "hypoexponential":
            return rng.exponential(1 / self.params["rate1"], size) + rng.exponential(
                1 / self.params["rate2"], size
            )
        return self._frozen().rvs(size=size, random_state=rng)

    def scale_time(self, factor):
        """Return the delay of ``factor * X`` (factor > 0)."""
        if factor <= 0:
            raise ValueError("factor must be positive")
        p = self.params
        if self.family == "exponential":
            return ContinuousDelay.exponential(p["rate"] / factor)
        if self.family == "gamma":
            return ContinuousDelay.gamma(p["shape"], p["rate"] / factor)
        if self.family == "lognormal":
            return ContinuousDelay.lognormal(p["meanlog"] + np.log(factor), p["sdlog"])
        if self.family == "weibull":
            return ContinuousDelay.weibull(p["shape"], p["scale"] * factor)
        return ContinuousDelay.hypoexponential(p["rate1"] / factor, p["rate2"] / factor)

    def to_dict(self):
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"family", "params"}
        if unknown:
            raise ValueError(f"unknown delay fields {sorted(unknown)}")
        return cls(d["family"], dict(d["params"]))


@dataclass(frozen=True)
class DiscretizedDelay:
    """Discrete delay weights.

    ``weights[i]`` is the mass at lag ``i + offset``.  Lags past the end of
    the vector carry zero weight.
    """

    weights: np.ndarray
    offset: int = 1

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if self.offset not in (0, 1):
            raise ValueError("offset must be 0 or 1")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if w.sum() > 1 + 1e-12:
            raise ValueError(f"weights sum to {w.sum()} > 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def at_lags(self, lags):
        """Weights at integer lags (zero outside the support)."""
        lags = np.asarray(lags)
        idx = lags - self.offset
        valid = (idx >= 0) & (idx < self.weights.size)
        out = np.zeros(lags.shape, dtype=float)
        out[valid] = self.weights[idx[valid]]
        return out

    def support_length(self, mass=0.99):
        """Smallest number of leading weights holding ``mass`` of the total."""
        c = np.cumsum(self.weights)
        return int(np.searchsorted(c, mass * c[-1] - 1e-15) + 1)

    def to_dict(self):
        return {"weights": self.weights.tolist(), "offset": self.offset}


def discretize(delay: ContinuousDelay, length: int, offset: int = 1) -> DiscretizedDelay:
    """Discretize ``delay`` on a unit grid.

    For lags ``u >= 2`` the weight is ``F(u + 0.5) - F(u - 0.5)``.  With
    ``offset=1`` the first weight is ``F(1.5)``; with ``offset=0`` the first
    two are ``F(0.5)`` and ``F(1.5) - F(0.5)``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if offset not in (0, 1):
        raise ValueError("offset must be 0 or 1")
    lags = np.arange(offset, offset + length)
    upper = delay.cdf(lags + 0.5)
    lower = delay.cdf(lags - 0.5)
    if offset == 1:
        lower[0] = 0.0
    else:
        lower[0] = 0.0  # F(-0.5) is zero anyway
    return DiscretizedDelay(np.clip(upper - lower, 0.0, None), offset)


def bin_weights(daily: DiscretizedDelay, width: int, length: int) -> DiscretizedDelay:
    """Collapse daily weights into bins of ``width`` days.

    Daily lag ``j`` goes to coarse lag ``k`` when ``j`` lies in the centred
    window ``[k*width - h, k*width + h]`` with ``h = width // 2``.  With
    offset 1 any mass below coarse lag 1 is folded into lag 1, mirroring the
    ``F(1.5)`` rule at the fine scale.  ``width`` must be odd.
    """
    if width < 1 or width % 2 == 0:
        raise ValueError("bin width must be a positive odd number")
    h = width // 2
    daily_lags = np.arange(daily.offset, daily.offset + len(daily))
    coarse = (daily_lags + h) // width
    if daily.offset == 1:
        coarse = np.maximum(coarse, 1)
    out = np.zeros(length)
    keep = coarse - daily.offset < length
    np.add.at(out, coarse[keep] - daily.offset, daily.weights[keep])
    return DiscretizedDelay(out, daily.offset)


def discretize_at_step(
    delay: ContinuousDelay, length: int, offset: int = 1, step_days: int = 1
) -> DiscretizedDelay:
    """Discretize a delay given in days onto a grid of ``step_days``.

    The delay is discretized daily first and the daily weights are summed
    into centred bins, which reproduces ``discretize`` applied on the coarse
    time unit.
    """
    if step_days == 1:
        return discretize(delay, length, offset)
    h = step_days // 2
    daily = discretize(delay, step_days * (length + offset) + h, offset)
    return bin_weights(daily, step_days, length)


def weighted_incidence_sum(incidence, weights: DiscretizedDelay, t: int) -> float:
    """Delay-weighted sum of past incidence at position ``t``.

    ``incidence[u]`` is incidence at position ``u``.  Returns
    ``sum_u incidence[u] * w[t - u]`` over ``u < t`` for offset-1 weights and
    ``u <= t`` for offset-0 weights.  ``t`` may equal ``len(incidence)``.
    """
    incidence = np.asarray(incidence, dtype=float)
    last = min(t + 1 if weights.offset == 0 else t, incidence.size)
    u = np.arange(last)
    return float(np.dot(incidence[:last], weights.at_lags(t - u)))


def convolution_matrix(weights: DiscretizedDelay, n_rows: int, n_seed: int) -> np.ndarray:
    """Matrix mapping incidence at positions ``-n_seed+1 .. n_rows`` to sums.

    Row ``t-1`` (for ``t = 1..n_rows``) holds the weights applied to the
    ``n_seed + n_rows`` incidence values by ``weighted_incidence_sum``.
    Column ``k`` corresponds to time ``k - n_seed + 1``.
    """
    times = np.arange(1, n_rows + 1)[:, None]
    cols = np.arange(n_seed + n_rows)[None, :] - n_seed + 1
    lags = times - cols
    return weights.at_lags(lags) * (lags >= weights.offset)
