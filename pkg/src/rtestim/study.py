"""Replicated simulation study comparing the estimators on SEIR outbreaks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import EpiEstimConfig, epiestim
from .fitting import fit
from .metrics import EstimateSeries, score_methods, summarize_replicates
from .models import ModelSettings
from .priors import elicit_kappa
from .sampler import SamplerConfig
from .seir import SeirConfig, scenario_presets, simulate

# R0 path used for the study: large enough outbreaks that weekly counts
# carry information about Rt in every scenario.
STUDY_R0_KNOTS = ((0.0, 3.0), (8.0, 1.2), (14.0, 1.5), (20.0, 0.8), (28.0, 1.1))

# log-normal (mu, sigma) priors on the per-test detection rate
STUDY_RHO_PRIORS = {"s1": (-11.06, 0.3), "s2": (-11.43, 0.3), "s3": (-11.56, 0.3)}

METHODS = ("gamma", "normal", "epiestim")


def study_config():
    return SeirConfig(r0_knots=STUDY_R0_KNOTS)


def replicate_seed(seed, scenario, replicate):
    """Independent integer seed per (scenario, replicate); replicate -1 is held out."""
    idx = sorted(scenario_presets()).index(scenario)
    ss = np.random.SeedSequence([int(seed), idx, int(replicate) + 1])
    return int(ss.generate_state(1)[0])


@dataclass
class ReplicateResult:
    scenario: str
    replicate: int
    seed: int
    truth: np.ndarray
    estimates: dict
    scores: dict
    truth_masv: float
    converged: dict
    predictive_coverage: dict
    extinct: bool = False


@dataclass
class StudyResult:
    kappa_priors: dict
    replicates: list = field(default_factory=list)

    def rows(self):
        out = []
        for r in self.replicates:
            for m, s in r.scores.items():
                out.append({"method": m, "scenario": r.scenario, "replicate": r.replicate,
                            **s, "truth_masv": r.truth_masv})
        return out

    def values(self, scenario, method, metric):
        return np.array([r.scores[method][metric] for r in self.replicates if r.scenario == scenario])

    def boxplots(self):
        out = {}
        for r in self.replicates:
            for m in r.scores:
                out.setdefault(r.scenario, {}).setdefault(m, None)
        for scen, methods in out.items():
            for m in methods:
                methods[m] = {
                    k: summarize_replicates(self.values(scen, m, k))
                    for k in ("envelope", "mciw", "abs_dev", "masv")
                }
        return out


def held_out_kappa(scenario, seed, sampler=None):
    """Elicit the over-dispersion prior from a replicate that is not analyzed."""
    truth = simulate(study_config(), scenario_presets()[scenario], seed=replicate_seed(seed, scenario, -1))
    (mu, sd), _ = elicit_kappa(truth.weekly.cases, sampler)
    return mu, sd


def settings_for(method, scenario, kappa_prior):
    if method == "gamma":
        mu_rho, s_rho = STUDY_RHO_PRIORS[scenario]
        return ModelSettings(
            "gamma",
            priors={"mu_rho": mu_rho, "sigma_rho": s_rho,
                    "mu_kappa": kappa_prior[0], "sigma_kappa": kappa_prior[1]},
        )
    return ModelSettings("normal")


def run_replicate(scenario, replicate, seed, kappa_prior, sampler: SamplerConfig):
    rseed = replicate_seed(seed, scenario, replicate)
    sim = simulate(study_config(), scenario_presets()[scenario], seed=rseed)
    obs, truth = sim.analysis()
    estimates, converged, coverage = {}, {}, {}
    for method in ("gamma", "normal"):
        settings = settings_for(method, scenario, kappa_prior)
        res = fit(obs, settings, sampler)
        converged[method] = res.converged
        s = res.rt()
        estimates[method] = EstimateSeries(np.arange(1, len(obs) + 1), s.median, s.lower95, s.upper95)
        coverage[method] = res.posterior_predictive(seed=rseed)[1]
    gen = settings_for("gamma", scenario, kappa_prior).bind(obs).generation
    estimates["epiestim"] = EstimateSeries.from_estimates(epiestim(obs, EpiEstimConfig(gen, window=1)))
    scores, truth_masv = score_methods(estimates, truth)
    return ReplicateResult(scenario, replicate, rseed, truth, estimates, scores, truth_masv,
                           converged, coverage, sim.extinct)


def run_study(scenarios=("s1", "s2", "s3"), replicates=10, seed=2022, sampler=None,
              kappa_sampler=None, progress=None):
    """Simulate, fit every method and score each replicate.

    Non-converged fits are kept and flagged in ``converged``; a held-out
    elicitation that fails its convergence gate raises ``ConvergenceError``.
    """
    sampler = sampler or SamplerConfig(seed=seed)
    result = StudyResult(kappa_priors={})
    for scen in scenarios:
        result.kappa_priors[scen] = held_out_kappa(scen, seed, kappa_sampler)
        for rep in range(replicates):
            r = run_replicate(scen, rep, seed, result.kappa_priors[scen], sampler)
            result.replicates.append(r)
            if progress:
                progress(r)
    return result
