"""Bayesian estimation of the effective reproduction number from case and test counts."""

from .data import ObservedSeries, SchemaError, aggregate_weekly, read_series, write_series
from .delays import ContinuousDelay, DiscretizedDelay, discretize, weighted_incidence_sum
from .diagnostics import ConvergenceError, Diagnostics, diagnose
from .fitting import FitResult, fit
from .models import GammaModelConfig, ModelSettings, NormalModelConfig, ParameterState, PriorSet
from .sampler import PosteriorDraws, SamplerConfig, sample

__version__ = "0.1.0"

__all__ = [
    "ContinuousDelay",
    "ConvergenceError",
    "Diagnostics",
    "DiscretizedDelay",
    "FitResult",
    "GammaModelConfig",
    "ModelSettings",
    "NormalModelConfig",
    "ObservedSeries",
    "ParameterState",
    "PosteriorDraws",
    "PriorSet",
    "SamplerConfig",
    "SchemaError",
    "aggregate_weekly",
    "diagnose",
    "discretize",
    "fit",
    "read_series",
    "sample",
    "weighted_incidence_sum",
    "write_series",
]
