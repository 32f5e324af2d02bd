"""Frequentist scores of interval estimates against a known truth."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EstimateSeries:
    """Per-time-point median and 95% interval; NaN marks a missing estimate."""

    t: np.ndarray
    median: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.t, self.median, self.lower95, self.upper95)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ValueError("t, median, lower95 and upper95 must be equal-length vectors")
        ok = np.isfinite(arrs[1]) & np.isfinite(arrs[2]) & np.isfinite(arrs[3])
        tol = 1e-9 * np.maximum(1.0, np.abs(arrs[1]))
        bad = ok & ((arrs[2] > arrs[1] + tol) | (arrs[1] > arrs[3] + tol))
        if np.any(bad):
            raise ValueError("need lower95 <= median <= upper95")
        for name, a in zip(("t", "median", "lower95", "upper95"), arrs):
            object.__setattr__(self, name, a)

    @classmethod
    def from_estimates(cls, estimates):
        """From objects with ``t_end``, ``median``, ``lower95``, ``upper95``."""
        return cls(
            np.array([e.t_end for e in estimates]),
            np.array([e.median for e in estimates]),
            np.array([e.lower95 for e in estimates]),
            np.array([e.upper95 for e in estimates]),
        )

    def __len__(self):
        return self.t.size

    @property
    def available(self):
        return np.isfinite(self.median) & np.isfinite(self.lower95) & np.isfinite(self.upper95)

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return EstimateSeries(self.t[mask], self.median[mask], self.lower95[mask], self.upper95[mask])


def _aligned(est, truth):
    truth = np.asarray(truth, dtype=float)
    if truth.shape != est.median.shape:
        raise ValueError(f"truth has length {truth.size}, estimates {len(est)}")
    return truth


def envelope(est: EstimateSeries, truth) -> float:
    """Share of time points whose closed 95% interval contains the truth."""
    truth = _aligned(est, truth)
    return float(np.mean((est.lower95 <= truth) & (truth <= est.upper95)))


def mciw(est: EstimateSeries) -> float:
    """Mean 95% interval width."""
    return float(np.mean(est.upper95 - est.lower95))


def absolute_deviation(est: EstimateSeries, truth) -> float:
    """Mean absolute difference between median and truth."""
    truth = _aligned(est, truth)
    return float(np.mean(np.abs(est.median - truth)))


def masv(medians) -> float:
    """Mean absolute change between consecutive values."""
    m = np.asarray(medians, dtype=float)
    if m.size < 2:
        raise ValueError("need at least two values")
    return float(np.mean(np.abs(np.diff(m))))


def common_points(estimates: dict):
    """Mask of time points where every method has an estimate."""
    masks = [e.available for e in estimates.values()]
    if len({m.shape for m in masks}) != 1:
        raise ValueError("methods cover different numbers of time points")
    return np.logical_and.reduce(masks)


def score_methods(estimates: dict, truth):
    """All four metrics per method on the jointly available points.

    Returns ``{method: {"envelope", "mciw", "abs_dev", "masv"}}`` and the
    truth MASV over the same points.
    """
    truth = np.asarray(truth, dtype=float)
    keep = common_points(estimates)
    out = {}
    for name, est in estimates.items():
        e = est.subset(keep)
        t = truth[keep]
        out[name] = {
            "envelope": envelope(e, t),
            "mciw": mciw(e),
            "abs_dev": absolute_deviation(e, t),
            "masv": masv(e.median),
        }
    return out, masv(truth[keep])


def summarize_replicates(values):
    """Box-plot statistics: median, quartiles and 1.5 IQR whiskers.

    Whiskers sit at the most extreme observations within 1.5 IQR of the
    quartiles (never inside the box), so they never leave the data range.
    """
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    # interpolated hinges can pass the nearest inner observation; clamp to them
    lo = min(v[v >= q1 - 1.5 * iqr].min(), q1)
    hi = max(v[v <= q3 + 1.5 * iqr].max(), q3)
    return {
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_low": float(lo),
        "whisker_high": float(hi),
        "n": int(v.size),
    }


METRIC_COLUMNS = ("method", "scenario", "replicate", "envelope", "mciw", "abs_dev", "masv", "truth_masv")


def write_metrics(rows, path):
    """Rows are dicts keyed by ``METRIC_COLUMNS``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else repr(r[c]) for c in METRIC_COLUMNS])
