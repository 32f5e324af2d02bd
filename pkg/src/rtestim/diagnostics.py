"""Convergence diagnostics for multi-chain MCMC output.

Split-chain rank-normalized R-hat (the larger of the bulk and folded
versions), bulk ESS on rank-normalized draws and tail ESS from the 5% and
95% quantile indicator series.  Autocorrelations are combined across chains
and truncated with Geyer's initial monotone sequence.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

RHAT_SENTINEL = 1.0e6
RHAT_MAX = 1.05
ESS_MIN = 100.0


class ConvergenceError(RuntimeError):
    """Raised when a fit fails the convergence gate; carries the diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Diagnostics:
    names: list
    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    single_chain: bool = False
    divergences: np.ndarray = field(default=None)

    def max_rhat(self):
        return float(np.max(self.rhat))

    def min_ess(self):
        return float(min(np.min(self.ess_bulk), np.min(self.ess_tail)))

    def verdict(self, rhat_max=RHAT_MAX, ess_min=ESS_MIN):
        """``(converged, reasons)`` against the R-hat and ESS thresholds."""
        reasons = []
        if self.single_chain:
            reasons.append("only one chain; split R-hat is not a reliable check")
        bad = ~np.isfinite(self.rhat) | (self.rhat >= rhat_max)
        if np.any(bad):
            worst = int(np.nanargmax(np.where(np.isfinite(self.rhat), self.rhat, np.inf)))
            reasons.append(f"max R-hat {self.rhat[worst]:.4g} ({self.names[worst]}) >= {rhat_max}")
        ess = np.minimum(self.ess_bulk, self.ess_tail)
        bad = ~np.isfinite(ess) | (ess <= ess_min)
        if np.any(bad):
            worst = int(np.nanargmin(np.where(np.isfinite(ess), ess, -np.inf)))
            reasons.append(f"min ESS {ess[worst]:.4g} ({self.names[worst]}) <= {ess_min}")
        return not reasons, reasons

    def to_dict(self):
        ok, reasons = self.verdict()
        out = {
            "converged": ok,
            "reasons": reasons,
            "max_rhat": _jsonable(self.max_rhat()),
            "min_ess_bulk": _jsonable(float(np.min(self.ess_bulk))),
            "min_ess_tail": _jsonable(float(np.min(self.ess_tail))),
        }
        if self.divergences is not None:
            out["divergences"] = [int(d) for d in self.divergences]
        return out


def _jsonable(x):
    return x if np.isfinite(x) else None


def _split(x):
    """(n, m) -> (n // 2, 2m), dropping the middle draw for odd n."""
    n = x.shape[0]
    half = n // 2
    return np.concatenate([x[:half], x[n - half :]], axis=1)


def _rank_normalize(x):
    ranks = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((ranks - 0.375) / (x.size + 0.25))


def _rhat_basic(x):
    n, m = x.shape
    chain_means = x.mean(axis=0)
    w = x.var(axis=0, ddof=1).mean()
    b = n * chain_means.var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else RHAT_SENTINEL
    var_plus = (n - 1) / n * w + b / n
    return float(min(np.sqrt(var_plus / w), RHAT_SENTINEL))


def _autocov(x):
    """Autocovariance of each column (biased, lag 0..n-1) via FFT."""
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:n]
    return acov / n


def _ess(x):
    """ESS of an (n, m) array of (already split) chains."""
    n, m = x.shape
    if np.all(x == x.flat[0]):
        return np.nan
    acov = _autocov(x)
    chain_var = acov[0] * n / (n - 1.0)
    w = chain_var.mean()
    if w == 0.0:
        return float(m)
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=0).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=1)) / var_plus
    rho[0] = 1.0
    # Geyer: positive pair sums, forced monotone
    n_pairs = n // 2
    pair = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    k = 1
    while k < n_pairs and pair[k] > 0:
        k += 1
    pair = np.minimum.accumulate(pair[:k])
    tau = -1.0 + 2.0 * pair.sum()
    tau = max(tau, 1.0 / np.log10(n * m))
    return float(n * m / tau)


def rhat(x):
    """Rank-normalized split R-hat for draws of shape ``(n, chains)``."""
    s = _split(np.asarray(x, dtype=float))
    if np.all(s == s.flat[0]):
        return 1.0
    bulk = _rhat_basic(_rank_normalize(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat_basic(_rank_normalize(folded)) if np.ptp(folded) > 0 else 1.0
    return max(bulk, tail)


def ess_bulk(x):
    s = _split(np.asarray(x, dtype=float))
    if np.all(s == s.flat[0]):
        return np.nan
    return _ess(_rank_normalize(s))


def ess_tail(x):
    s = _split(np.asarray(x, dtype=float))
    out = []
    for q in (0.05, 0.95):
        ind = (s <= np.quantile(s, q)).astype(float)
        out.append(_ess(ind))
    return float(np.nanmin(out)) if not np.all(np.isnan(out)) else np.nan


def diagnose(draws) -> Diagnostics:
    """Diagnostics for every parameter of a :class:`PosteriorDraws`."""
    arr = np.asarray(draws.draws, dtype=float)
    n, m, p = arr.shape
    if n < 4:
        raise ValueError("need at least 4 retained draws per chain")
    single = m < 2
    if single:
        warnings.warn("single chain: R-hat computed from chain halves only", stacklevel=2)
    r = np.empty(p)
    eb = np.empty(p)
    et = np.empty(p)
    for j in range(p):
        x = arr[:, :, j]
        r[j] = rhat(x)
        eb[j] = ess_bulk(x)
        et[j] = ess_tail(x)
    return Diagnostics(
        names=list(draws.names),
        rhat=r,
        ess_bulk=eb,
        ess_tail=et,
        single_chain=single,
        divergences=getattr(draws, "divergences", None),
    )


def check_convergence(diag: Diagnostics, rhat_max=RHAT_MAX, ess_min=ESS_MIN):
    """Raise :class:`ConvergenceError` unless the fit passes the gate."""
    ok, reasons = diag.verdict(rhat_max, ess_min)
    if not ok:
        raise ConvergenceError("fit did not converge: " + "; ".join(reasons), diag)
    return diag
