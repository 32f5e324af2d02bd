"""No-U-Turn Hamiltonian Monte Carlo with windowed warmup adaptation.

The transition is multinomial NUTS with the iterative (checkpointed) U-turn
check, so the same source runs compiled for numba targets and as plain
Python for arbitrary callables.  A target is either

* a callable ``f(theta) -> (logp, grad)``, or
* an object exposing ``kernel`` (a numba function ``kernel(theta, data)``)
  and ``data``; these run fully compiled.

Warmup follows the usual three-stage scheme: a fast initial buffer for the
step size, doubling slow windows that estimate a diagonal inverse metric,
and a terminal buffer; the step size is tuned by dual averaging throughout.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

MAX_ENERGY_ERROR = 1000.0
INIT_RETRIES = 10
RUN_LENGTHS = {"simulation": 2000, "real-data": 6000}


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 2000
    warmup: int = 1000
    seed: int = 1
    target_acceptance: float = 0.8
    max_tree_depth: int = 10
    jobs: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 1 or self.warmup < 1:
            raise ValueError("chains, iterations and warmup must be positive")
        if self.warmup >= self.iterations:
            raise ValueError("warmup must be smaller than iterations")
        if not 0 < self.target_acceptance < 1:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be positive")

    @classmethod
    def preset(cls, name, **overrides):
        """Run lengths for ``"simulation"`` (2000 iterations) or ``"real-data"`` (6000).

        Half of the iterations are warmup in both cases.
        """
        try:
            n = RUN_LENGTHS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(RUN_LENGTHS)}") from None
        return cls(**{"iterations": n, "warmup": n // 2, **overrides})


@dataclass
class PosteriorDraws:
    """Retained draws with shape ``(iterations - warmup, chains, parameters)``."""

    draws: np.ndarray
    names: list
    divergences: np.ndarray
    accept_stat: np.ndarray = None
    step_size: np.ndarray = None
    tree_depth: np.ndarray = None
    init_attempts: np.ndarray = field(default=None)
    divergent: np.ndarray = None

    @property
    def n_draws(self):
        return self.draws.shape[0]

    @property
    def n_chains(self):
        return self.draws.shape[1]

    def column(self, name):
        return self.draws[:, :, self.names.index(name)]

    def flat(self):
        """Draws pooled over chains: ``(n_draws * n_chains, parameters)``."""
        return self.draws.transpose(1, 0, 2).reshape(-1, self.draws.shape[2])

    def to_long_csv(self, path, transform=None):
        """Write ``chain,iteration,parameter,value`` rows."""
        values = self.draws if transform is None else transform(self.draws)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "iteration", "parameter", "value"])
            for c in range(self.n_chains):
                for i in range(self.n_draws):
                    for j, name in enumerate(self.names):
                        w.writerow([c, i, name, repr(float(values[i, c, j]))])

    def summary(self):
        """Median and central 95% interval per parameter."""
        flat = self.flat()
        q = np.quantile(flat, [0.5, 0.025, 0.975], axis=0)
        return {
            name: {"median": float(q[0, j]), "lower95": float(q[1, j]), "upper95": float(q[2, j])}
            for j, name in enumerate(self.names)
        }

    def write_summary_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# --------------------------------------------------------------------------
# transition


@njit(cache=True, error_model="numpy")
def _is_turning(inv_metric, p_left, p_right, rho):
    a = 0.0
    b = 0.0
    for i in range(rho.size):
        v = inv_metric[i] * rho[i]
        a += p_left[i] * v
        b += p_right[i] * v
    return a <= 0.0 or b <= 0.0


@njit(cache=True, error_model="numpy")
def _popcount(n):
    c = 0
    while n:
        c += n & 1
        n >>= 1
    return c


@njit(cache=True, error_model="numpy")
def _trailing_ones(n):
    c = 0
    while n & 1:
        c += 1
        n >>= 1
    return c


@njit(cache=True, error_model="numpy")
def _kinetic(inv_metric, p):
    s = 0.0
    for i in range(p.size):
        s += inv_metric[i] * p[i] * p[i]
    return 0.5 * s


@njit(cache=True, error_model="numpy")
def _log_add_exp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def _transition(fn, data, theta0, lp0, grad0, eps, inv_metric, max_depth, p0, u):
    """One multinomial NUTS transition.

    ``p0`` is the initial momentum and ``u`` holds at least
    ``2 * max_depth + 2**max_depth`` uniforms.  Returns the new state, the
    mean Metropolis acceptance statistic over all leapfrog steps, the number
    of steps, the tree depth and a divergence flag.
    """
    dim = theta0.size
    H0 = -lp0 + _kinetic(inv_metric, p0)

    th_l = theta0.copy()
    p_l = p0.copy()
    g_l = grad0.copy()
    lp_l = lp0
    th_r = theta0.copy()
    p_r = p0.copy()
    g_r = grad0.copy()
    lp_r = lp0

    prop_th = theta0.copy()
    prop_g = grad0.copy()
    prop_lp = lp0

    rho = p0.copy()
    log_w = 0.0
    sum_acc = 0.0
    n_leap = 0
    depth = 0
    diverging = False
    r_ckpts = np.zeros((max_depth, dim))
    r_sum_ckpts = np.zeros((max_depth, dim))
    ui = 0

    while depth < max_depth:
        direction = 1.0 if u[ui] < 0.5 else -1.0
        ui += 1
        if direction > 0:
            th = th_r.copy()
            p = p_r.copy()
            g = g_r.copy()
            lp = lp_r
        else:
            th = th_l.copy()
            p = p_l.copy()
            g = g_l.copy()
            lp = lp_l
        step = direction * eps

        n_leaves = 1 << depth
        sub_log_w = -np.inf
        sub_rho = np.zeros(dim)
        sub_th = th.copy()
        sub_g = g.copy()
        sub_lp = lp
        turning = False
        for k in range(n_leaves):
            p = p + 0.5 * step * g
            th = th + step * inv_metric * p
            lp, g = fn(th, data)
            p = p + 0.5 * step * g
            n_leap += 1
            H = -lp + _kinetic(inv_metric, p)
            if not math.isfinite(H):
                H = np.inf
            delta = H0 - H
            if -delta > MAX_ENERGY_ERROR:
                diverging = True
            sum_acc += 1.0 if delta > 0 else math.exp(delta)
            if diverging:
                break
            # uniform progressive sampling inside the subtree
            new_log_w = _log_add_exp(sub_log_w, delta)
            if k == 0:
                sub_th = th.copy()
                sub_g = g.copy()
                sub_lp = lp
            else:
                if u[ui] < math.exp(delta - new_log_w):
                    sub_th = th.copy()
                    sub_g = g.copy()
                    sub_lp = lp
                ui += 1
            sub_log_w = new_log_w
            sub_rho = sub_rho + p
            # U-turn checks of every sub-subtree ending at this leaf
            idx_max = _popcount(k >> 1)
            if k % 2 == 0:
                r_ckpts[idx_max] = p
                r_sum_ckpts[idx_max] = sub_rho
            else:
                idx_min = idx_max - _trailing_ones(k) + 1
                i = idx_max
                while i >= idx_min:
                    seg_rho = sub_rho - r_sum_ckpts[i] + r_ckpts[i]
                    if _is_turning(inv_metric, r_ckpts[i], p, seg_rho):
                        turning = True
                        break
                    i -= 1
                if turning:
                    break
        if diverging or turning:
            break

        if direction > 0:
            th_r = th
            p_r = p
            g_r = g
            lp_r = lp
        else:
            th_l = th
            p_l = p
            g_l = g
            lp_l = lp

        # biased progressive sampling between old tree and new subtree
        if sub_log_w > log_w or u[ui] < math.exp(sub_log_w - log_w):
            prop_th = sub_th
            prop_g = sub_g
            prop_lp = sub_lp
        ui += 1
        log_w = _log_add_exp(log_w, sub_log_w)
        rho = rho + sub_rho
        depth += 1
        if _is_turning(inv_metric, p_l, p_r, rho):
            break

    return prop_th, prop_lp, prop_g, sum_acc / n_leap, n_leap, depth, diverging


_transition_jit = njit(error_model="numpy")(_transition)


def _call_python(theta, target):
    return target(theta)


def _resolve(target):
    """Pick the compiled or interpreted transition for ``target``."""
    if hasattr(target, "kernel") and hasattr(target, "data"):
        return _transition_jit, target.kernel, target.data
    return _transition, _call_python, target


def _evaluate(fn, data, theta):
    lp, g = fn(np.ascontiguousarray(theta, dtype=float), data)
    return float(lp), np.asarray(g, dtype=float)


# --------------------------------------------------------------------------
# adaptation


class _DualAveraging:
    """Nesterov dual averaging of log step size towards a target acceptance.

    ``gamma`` is twice the textbook 0.05: with short terminal buffers the
    smaller value leaves the averaged step size noticeably too small, so the
    realized acceptance overshoots the target.
    """

    def __init__(self, eps, delta, gamma=0.1, t0=10.0, kappa=0.75):
        self.delta = delta
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept):
        self.counter += 1
        accept = min(1.0, accept)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


def _warmup_windows(warmup, init_buffer=75, term_buffer=100, base_window=25):
    """End iterations (exclusive) of the slow metric-adaptation windows."""
    if warmup < 20:
        return init_buffer, []
    if init_buffer + term_buffer + base_window > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        # stretch the final window when the next one would not fit
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return init_buffer, ends


def _initial_step_size(fn, data, theta, lp, grad, inv_metric, rng, eps=1.0):
    """Double or halve ``eps`` until one leapfrog step crosses acceptance 0.8."""
    p = rng.standard_normal(theta.size) / np.sqrt(inv_metric)
    H0 = -lp + 0.5 * np.sum(inv_metric * p * p)

    def delta_h(e):
        pp = p + 0.5 * e * grad
        th = theta + e * inv_metric * pp
        lp1, g1 = _evaluate(fn, data, th)
        pp = pp + 0.5 * e * g1
        H = -lp1 + 0.5 * np.sum(inv_metric * pp * pp)
        return H0 - H if np.isfinite(H) else -np.inf

    # trial steps can be wildly too large; overflow there just means rejection
    with np.errstate(over="ignore", invalid="ignore"):
        return _search_step(delta_h, eps)


def _search_step(delta_h, eps):
    d = delta_h(eps)
    direction = 1 if d > math.log(0.8) else -1
    for _ in range(100):
        eps_new = eps * (2.0 if direction > 0 else 0.5)
        d = delta_h(eps_new)
        if direction > 0 and not d > math.log(0.8):
            break
        if direction < 0 and d > math.log(0.8):
            eps = eps_new
            break
        eps = eps_new
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


# --------------------------------------------------------------------------
# chains


def _run_chain(target, init, config: SamplerConfig, chain: int):
    transition, fn, data = _resolve(target)
    ss = np.random.SeedSequence(config.seed, spawn_key=(chain,))
    rng = np.random.Generator(np.random.PCG64(ss))
    dim = init.size

    theta = np.array(init, dtype=float)
    attempts = 1
    lp, grad = _evaluate(fn, data, theta)
    while not (np.isfinite(lp) and np.all(np.isfinite(grad))):
        if attempts > INIT_RETRIES:
            raise FloatingPointError(
                f"chain {chain}: target not finite at init after {INIT_RETRIES} jittered retries"
            )
        theta = np.array(init, dtype=float) + rng.uniform(-0.1, 0.1, dim)
        lp, grad = _evaluate(fn, data, theta)
        attempts += 1

    inv_metric = np.ones(dim)
    eps = _initial_step_size(fn, data, theta, lp, grad, inv_metric, rng)
    da = _DualAveraging(eps, config.target_acceptance)
    init_buffer, window_ends = _warmup_windows(config.warmup)
    window_start = init_buffer
    window_draws = []

    depth_cap = config.max_tree_depth
    n_u = 2 * depth_cap + (1 << depth_cap)
    n_keep = config.iterations - config.warmup
    draws = np.empty((n_keep, dim))
    accept = np.empty(n_keep)
    depths = np.empty(n_keep, dtype=np.int64)
    divergent = np.zeros(n_keep, dtype=bool)

    for it in range(config.iterations):
        p0 = rng.standard_normal(dim) / np.sqrt(inv_metric)
        u = rng.random(n_u)
        theta, lp, grad, acc, _, depth, div = transition(
            fn, data, theta, lp, grad, eps, inv_metric, depth_cap, p0, u
        )
        if it < config.warmup:
            eps = da.update(acc)
            if window_ends and window_start <= it < window_ends[-1]:
                window_draws.append(theta.copy())
                if it + 1 == window_ends[0]:
                    w = np.asarray(window_draws)
                    n = w.shape[0]
                    var = w.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
                    inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    window_ends.pop(0)
                    window_draws = []
                    eps = _initial_step_size(fn, data, theta, lp, grad, inv_metric, rng, eps)
                    da.restart(eps)
            if it + 1 == config.warmup:
                eps = da.final()
        else:
            k = it - config.warmup
            draws[k] = theta
            accept[k] = acc
            depths[k] = depth
            divergent[k] = div

    return draws, accept, depths, divergent, eps, attempts


def sample(target, inits, config: SamplerConfig, names=None) -> PosteriorDraws:
    """Run ``config.chains`` independent NUTS chains.

    ``inits`` is one vector (shared) or a sequence with one vector per
    chain.  Chains are deterministic given ``(config.seed, chain index)``
    regardless of ``config.jobs``.
    """
    inits = np.atleast_2d(np.asarray(inits, dtype=float))
    if inits.shape[0] == 1:
        inits = np.repeat(inits, config.chains, axis=0)
    if inits.shape[0] != config.chains:
        raise ValueError("need one init per chain")
    # fail fast on a broken target before spawning workers
    transition, fn, data = _resolve(target)
    lp, grad = _evaluate(fn, data, inits[0])
    if np.shape(grad) != inits[0].shape:
        raise ValueError("gradient has the wrong shape")

    jobs = max(1, min(config.jobs, config.chains))
    if jobs == 1:
        results = [_run_chain(target, inits[c], config, c) for c in range(config.chains)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_chain, target, inits[c], config, c) for c in range(config.chains)
            ]
            results = [f.result() for f in futures]

    draws = np.stack([r[0] for r in results], axis=1)
    dim = draws.shape[2]
    return PosteriorDraws(
        draws=draws,
        names=list(names) if names is not None else [f"theta[{i}]" for i in range(dim)],
        divergences=np.array([int(r[3].sum()) for r in results]),
        accept_stat=np.stack([r[1] for r in results], axis=1),
        step_size=np.array([r[4] for r in results]),
        tree_depth=np.stack([r[2] for r in results], axis=1),
        init_attempts=np.array([r[5] for r in results]),
        divergent=np.stack([r[3] for r in results], axis=1),
    )


def default_jobs():
    """Worker count from ``RT_ESTIM_THREADS`` (falls back to 1)."""
    try:
        return max(1, int(os.environ.get("RT_ESTIM_THREADS", "1")))
    except ValueError:
        return 1
