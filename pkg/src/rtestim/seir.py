"""Stochastic SEIR outbreaks with test-volume-dependent case reporting.

Transmission is simulated event by event (Gillespie) with the transmission
rate held fixed within each day.  Daily cases are negative-binomial draws
around ``rho * tests * (E -> I transitions)`` and weekly series are formed
with :func:`rtestim.data.aggregate_weekly`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .data import ObservedSeries, aggregate_weekly

DEFAULT_R0_KNOTS = ((0.0, 2.0), (8.0, 0.9), (14.0, 1.5), (20.0, 0.8), (28.0, 1.1))


@dataclass(frozen=True)
class SeirConfig:
    population: int = 1_000_000
    initial_infectious: int = 10
    latent_mean_days: float = 4.0
    infectious_mean_days: float = 7.5
    r0_knots: tuple = DEFAULT_R0_KNOTS
    horizon_weeks: int = 28
    discard_weeks: int = 11

    def __post_init__(self):
        if self.population < 1 or self.initial_infectious < 1:
            raise ValueError("population and initial_infectious must be positive")
        if self.initial_infectious > self.population:
            raise ValueError("initial_infectious exceeds the population")
        if self.latent_mean_days <= 0 or self.infectious_mean_days <= 0:
            raise ValueError("latent and infectious means must be positive")
        if not 0 <= self.discard_weeks < self.horizon_weeks:
            raise ValueError("need 0 <= discard_weeks < horizon_weeks")
        weeks = [w for w, _ in self.r0_knots]
        if any(b <= a for a, b in zip(weeks, weeks[1:])):
            raise ValueError("R0 knots must have increasing weeks")
        if any(r < 0 for _, r in self.r0_knots):
            raise ValueError("R0 must be non-negative")

    def r0(self, day):
        """Piecewise-linear basic reproduction number at ``day`` (0-based)."""
        weeks, values = zip(*self.r0_knots)
        return np.interp(np.asarray(day, dtype=float) / 7.0, weeks, values)

    def to_dict(self):
        return {
            "population": self.population,
            "initial_infectious": self.initial_infectious,
            "latent_mean_days": self.latent_mean_days,
            "infectious_mean_days": self.infectious_mean_days,
            "r0_knots": [list(k) for k in self.r0_knots],
            "horizon_weeks": self.horizon_weeks,
            "discard_weeks": self.discard_weeks,
        }


@dataclass(frozen=True)
class TestingScenario:
    """Weekly test volumes.

    ``kind="normal"``: params ``mean``, ``sd`` (draws redrawn until positive).
    ``kind="ramp"``: params ``flat_weeks``, ``flat_level``, ``ramp_target``,
    ``ramp_weeks``; the level is flat through week ``flat_weeks`` (1-based),
    rises linearly to ``ramp_target`` at week ``flat_weeks + ramp_weeks`` and
    stays there.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        need = {"normal": {"mean", "sd"}, "ramp": {"flat_weeks", "flat_level", "ramp_target", "ramp_weeks"}}
        if self.kind not in need:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if set(self.params) != need[self.kind]:
            raise ValueError(f"{self.kind} scenario needs {sorted(need[self.kind])}")
        if any(v <= 0 for v in self.params.values()):
            raise ValueError("scenario parameters must be positive")

    def weekly_tests(self, weeks, rng):
        p = self.params
        if self.kind == "normal":
            out = rng.normal(p["mean"], p["sd"], weeks)
            while np.any(out < 1):
                bad = out < 1
                out[bad] = rng.normal(p["mean"], p["sd"], int(bad.sum()))
            return np.rint(out).astype(np.int64)
        w = np.arange(1, weeks + 1, dtype=float)
        frac = np.clip((w - p["flat_weeks"]) / p["ramp_weeks"], 0.0, 1.0)
        level = p["flat_level"] + frac * (p["ramp_target"] - p["flat_level"])
        return np.rint(level).astype(np.int64)

    def ramp_slope(self):
        p = self.params
        return (p["ramp_target"] - p["flat_level"]) / p["ramp_weeks"]

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}


def scenario_presets():
    """The three testing scenarios: noisy constant volume and two ramps."""
    return {
        "s1": TestingScenario("normal", {"mean": 10_000.0, "sd": 1_000.0}),
        "s2": TestingScenario(
            "ramp", {"flat_weeks": 6, "flat_level": 5_000.0, "ramp_target": 30_000.0, "ramp_weeks": 11}
        ),
        "s3": TestingScenario(
            "ramp", {"flat_weeks": 8, "flat_level": 5_000.0, "ramp_target": 50_000.0, "ramp_weeks": 9}
        ),
    }


def daily_tests(weekly):
    """Spread weekly totals over days: ``weekly // 7`` each, remainder on day 7."""
    weekly = np.asarray(weekly, dtype=np.int64)
    daily = np.repeat(weekly // 7, 7).reshape(-1, 7)
    daily[:, -1] += weekly % 7
    return daily.ravel()


@njit(cache=True)
def _gillespie(seed, n_days, N, I0, beta, latent_rate, recovery_rate):
    np.random.seed(seed)
    S = N - I0
    E = 0
    I = I0
    R = 0
    state = np.empty((n_days + 1, 4), dtype=np.int64)
    infections = np.zeros(n_days, dtype=np.int64)
    transitions = np.zeros(n_days, dtype=np.int64)
    state[0, 0] = S
    state[0, 1] = E
    state[0, 2] = I
    state[0, 3] = R
    t = 0.0
    for day in range(n_days):
        b = beta[day]
        end = day + 1.0
        while True:
            r_inf = b * S * I / N
            r_lat = latent_rate * E
            r_rec = recovery_rate * I
            total = r_inf + r_lat + r_rec
            if total <= 0.0:
                t = end
                break
            t += -math.log(1.0 - np.random.random()) / total
            if t >= end:
                # memorylessness: restart the clock at the day boundary
                t = end
                break
            u = np.random.random() * total
            if u < r_inf:
                S -= 1
                E += 1
                infections[day] += 1
            elif u < r_inf + r_lat:
                E -= 1
                I += 1
                transitions[day] += 1
            else:
                I -= 1
                R += 1
        state[day + 1, 0] = S
        state[day + 1, 1] = E
        state[day + 1, 2] = I
        state[day + 1, 3] = R
    return state, infections, transitions


@dataclass
class SimulationTruth:
    """One simulated outbreak and its surveillance record.

    ``state[d]`` holds ``S, E, I, R`` at the start of day ``d`` (row ``n_days``
    is the final state).  ``rt_daily[d] = R0(d) S(d) / N``.
    """

    config: SeirConfig
    scenario: TestingScenario
    state: np.ndarray
    infections: np.ndarray
    transitions: np.ndarray
    rt_daily: np.ndarray
    daily: ObservedSeries
    weekly: ObservedSeries
    extinct: bool
    seed: int = 0

    @property
    def rt_weekly(self):
        """True Rt on the third day of every week."""
        return self.rt_daily[2::7][: len(self.weekly)]

    @property
    def infections_weekly(self):
        return self.infections.reshape(-1, 7).sum(axis=1)

    @property
    def transitions_weekly(self):
        return self.transitions.reshape(-1, 7).sum(axis=1)

    def analysis(self):
        """Weekly series and truth after the discarded burn-in weeks."""
        k = self.config.discard_weeks
        return self.weekly.slice(k), self.rt_weekly[k:]

    def write_truth(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "S", "E", "I", "R", "transitions", "Rt"])
            for d in range(self.transitions.size):
                s, e, i, r = (int(v) for v in self.state[d])
                w.writerow([d + 1, s, e, i, r, int(self.transitions[d]), repr(float(self.rt_daily[d]))])


def emit_cases(transitions, tests, rho, kappa, rng):
    """Negative-binomial case counts with mean ``rho * tests * transitions``, capped at tests."""
    mean = rho * np.asarray(tests, dtype=float) * np.asarray(transitions, dtype=float)
    cases = np.zeros(mean.size, dtype=np.int64)
    pos = mean > 0
    if np.isinf(kappa):
        cases[pos] = rng.poisson(mean[pos])
    else:
        cases[pos] = rng.negative_binomial(kappa, kappa / (kappa + mean[pos]))
    return np.minimum(cases, np.asarray(tests, dtype=np.int64))


def simulate(config: SeirConfig, scenario: TestingScenario, rho=9e-5, kappa=5.0, seed=0):
    """Simulate one outbreak and its daily/weekly case and test series."""
    if rho <= 0 or kappa <= 0:
        raise ValueError("rho and kappa must be positive")
    ss = np.random.SeedSequence(seed)
    sim_ss, test_ss, case_ss = ss.spawn(3)
    n_days = 7 * config.horizon_weeks
    days = np.arange(n_days)
    beta = config.r0(days) / config.infectious_mean_days
    state, infections, transitions = _gillespie(
        int(sim_ss.generate_state(1)[0]),
        n_days,
        config.population,
        config.initial_infectious,
        beta,
        1.0 / config.latent_mean_days,
        1.0 / config.infectious_mean_days,
    )
    rt = config.r0(days) * state[:-1, 0] / config.population
    weekly_tests = scenario.weekly_tests(config.horizon_weeks, np.random.default_rng(test_ss))
    tests = daily_tests(weekly_tests)
    cases = emit_cases(transitions, tests, rho, kappa, np.random.default_rng(case_ss))
    daily = ObservedSeries(cases, tests, "daily", 1)
    weekly = aggregate_weekly(daily)
    burn = 7 * config.discard_weeks
    extinct = bool(state[burn, 1] + state[burn, 2] == 0)
    return SimulationTruth(
        config, scenario, state, infections, transitions, rt, daily, weekly, extinct, seed
    )
