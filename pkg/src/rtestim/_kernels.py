"""Compiled log-density kernels.

Every kernel has the signature ``kernel(theta, data) -> (logp, grad)`` so the
sampler can call it from compiled code.  ``data`` is a tuple of arrays built
by the model classes.
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, error_model="numpy")
def digamma(x):
    """Digamma for x > 0 (recurrence up to x >= 10, then asymptotic series)."""
    r = 0.0
    while x < 10.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    tail = f * (
        1.0 / 12
        - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f * (1.0 / 132 - f * 691.0 / 32760))))
    )
    return r + math.log(x) - 0.5 / x - tail


@njit(cache=True, error_model="numpy")
def nb_term(y, mu, k, lgamma_y1):
    """Log pmf of NegBinom(mean mu, dispersion k) and its mu/k derivatives."""
    lp = (
        math.lgamma(y + k)
        - math.lgamma(k)
        - lgamma_y1
        - k * math.log1p(mu / k)
        + y * (math.log(mu) - math.log(k + mu))
    )
    d_mu = y / mu - (k + y) / (k + mu)
    d_k = digamma(y + k) - digamma(k) - math.log1p(mu / k) + (mu - y) / (k + mu)
    return lp, d_mu, d_k


@njit(cache=True, error_model="numpy")
def _lower_matvec(W, v, rows):
    # W[t, k] is zero for k > n_seed + t, so rows only need a prefix
    out = np.zeros(rows)
    ncol = W.shape[1]
    for t in range(rows):
        s = 0.0
        for k in range(ncol):
            s += W[t, k] * v[k]
        out[t] = s
    return out


@njit(cache=True, error_model="numpy")
def _seeding(x, n, log_lam, eta, gx):
    lam = math.exp(log_lam)
    total = 0.0
    lp = math.log(eta) - eta * lam + log_lam
    for k in range(n):
        ik = math.exp(x[k])
        total += ik
        lp += log_lam - lam * ik + x[k]
        gx[k] += 1.0 - lam * ik
    d_lam = 1.0 + n - eta * lam - lam * total
    return lp, d_lam


@njit(cache=True, error_model="numpy")
def _walk(z, mu1, sd1, step_sd, log_step_sd, gz):
    T = z.size
    lp = -0.5 * LOG_2PI - math.log(sd1) - 0.5 * ((z[0] - mu1) / sd1) ** 2
    gz[0] -= (z[0] - mu1) / sd1**2
    ss = 0.0
    for t in range(1, T):
        dz = z[t] - z[t - 1]
        ss += dz * dz
        inc = dz / step_sd**2
        gz[t] -= inc
        gz[t - 1] += inc
    m = T - 1
    lp += -m * (0.5 * LOG_2PI + log_step_sd) - 0.5 * ss / step_sd**2
    d_log_step = -m + ss / step_sd**2
    return lp, d_log_step


@njit(cache=True, error_model="numpy")
def _normal_lp(x, mu, sd):
    return -0.5 * LOG_2PI - math.log(sd) - 0.5 * ((x - mu) / sd) ** 2


@njit(cache=True, error_model="numpy")
def gamma_model(theta, data):
    n, T, G, D, cases, tests, lg_cases, pri = data
    mu_nu, sd_nu, mu_sig, sd_sig, eta, mu_r1, sd_r1, mu_rho, sd_rho, mu_k, sd_k = (
        pri[0], pri[1], pri[2], pri[3], pri[4], pri[5], pri[6], pri[7], pri[8], pri[9], pri[10]
    )
    nI = n + T
    x = theta[:nI]
    z = theta[nI : nI + T]
    log_nu = theta[nI + T]
    log_sigma = theta[nI + T + 1]
    log_rho = theta[nI + T + 2]
    log_lam = theta[nI + T + 3]
    log_kappa = theta[nI + T + 4]
    nu = math.exp(log_nu)
    sigma = math.exp(log_sigma)
    rho = math.exp(log_rho)
    kappa = math.exp(log_kappa)
    inc = np.exp(x)

    grad = np.zeros(theta.size)
    gx = grad[:nI]
    gz = grad[nI : nI + T]

    lp, g_lam = _seeding(x, n, log_lam, eta, gx)

    # latent gamma process; density of I_t times its Jacobian I_t
    lam_t = _lower_matvec(G, inc, T)
    g_nu = 0.0
    back = np.zeros(T)
    for t in range(T):
        a = math.exp(z[t]) * lam_t[t] * nu
        it = inc[n + t]
        xt = x[n + t]
        lp += a * log_nu - math.lgamma(a) + a * xt - nu * it
        w = log_nu - digamma(a) + xt
        gz[t] += w * a
        g_nu += w * a + a - nu * it
        gx[n + t] += a - nu * it
        back[t] = w * math.exp(z[t]) * nu

    # random walk, step variance sigma^2 / (T - 1)
    step = sigma / math.sqrt(T - 1.0)
    lp_w, g_sigma = _walk(z, mu_r1, sd_r1, step, math.log(step), gz)
    lp += lp_w

    # emission
    d_t = _lower_matvec(D, inc, T)
    g_rho = 0.0
    g_kappa = 0.0
    back_d = np.zeros(T)
    for t in range(T):
        mu = rho * tests[t] * d_t[t]
        lpt, d_mu, d_k = nb_term(cases[t], mu, kappa, lg_cases[t])
        lp += lpt
        g_rho += d_mu * mu
        g_kappa += d_k
        back_d[t] = d_mu * rho * tests[t]
    g_kappa *= kappa

    # chain rule through the renewal and delay sums
    for k in range(nI):
        s = 0.0
        for t in range(T):
            s += G[t, k] * back[t] + D[t, k] * back_d[t]
        gx[k] += inc[k] * s

    # priors on log-scale scalars
    lp += _normal_lp(log_nu, mu_nu, sd_nu)
    g_nu -= (log_nu - mu_nu) / sd_nu**2
    lp += _normal_lp(log_sigma, mu_sig, sd_sig)
    g_sigma -= (log_sigma - mu_sig) / sd_sig**2
    lp += _normal_lp(log_rho, mu_rho, sd_rho)
    g_rho -= (log_rho - mu_rho) / sd_rho**2
    # truncated normal on kappa without its constant, plus Jacobian
    lp += _normal_lp(kappa, mu_k, sd_k) + log_kappa
    g_kappa += 1.0 - kappa * (kappa - mu_k) / sd_k**2

    grad[nI + T] = g_nu
    grad[nI + T + 1] = g_sigma
    grad[nI + T + 2] = g_rho
    grad[nI + T + 3] = g_lam
    grad[nI + T + 4] = g_kappa
    return lp, grad


@njit(cache=True, error_model="numpy")
def normal_model(theta, data):
    n, T, G, D, cases, tests, lg_cases, pri, var_form = data
    mu_sig, sd_sig, eta, mu_r1, sd_r1, mu_psi, sd_psi, mu_a, sd_a, mu_ip, sd_ip = (
        pri[0], pri[1], pri[2], pri[3], pri[4], pri[5], pri[6], pri[7], pri[8], pri[9], pri[10]
    )
    nI = n + T
    x = theta[:nI]
    z = theta[nI : nI + T]
    log_sigma = theta[nI + T]
    log_psi = theta[nI + T + 1]
    log_alpha = theta[nI + T + 2]
    log_ip = theta[nI + T + 3]
    log_lam = theta[nI + T + 4]
    sigma = math.exp(log_sigma)
    psi = math.exp(log_psi)
    alpha = math.exp(log_alpha)
    # phi scales the quadratic variance term (var = y + phi y^2), so the
    # negative-binomial size is 1 / phi
    inv_phi = math.exp(log_ip)
    inc = np.exp(x)

    grad = np.zeros(theta.size)
    gx = grad[:nI]
    gz = grad[nI : nI + T]

    lp, g_lam = _seeding(x, n, log_lam, eta, gx)

    lam_t = _lower_matvec(G, inc, T)
    g_psi = 0.0
    back = np.zeros(T)
    for t in range(T):
        r_t = math.exp(z[t])
        m = r_t * lam_t[t]
        it = inc[n + t]
        resid = it - m
        if var_form:
            var = psi * m
            lp += -0.5 * LOG_2PI - 0.5 * math.log(var) - 0.5 * resid * resid / var
            d_m = -0.5 / m + resid / var + 0.5 * resid * resid / (var * m)
            g_psi += -0.5 + 0.5 * resid * resid / var
        else:
            sd = psi * m
            var = sd * sd
            lp += -0.5 * LOG_2PI - math.log(sd) - 0.5 * resid * resid / var
            d_m = -1.0 / m + it * resid / (psi * psi * m * m * m)
            g_psi += -1.0 + resid * resid / var
        lp += x[n + t]
        gx[n + t] += -it * resid / var + 1.0
        gz[t] += d_m * m
        back[t] = d_m * r_t

    lp_w, g_sigma = _walk(z, mu_r1, sd_r1, sigma, log_sigma, gz)
    lp += lp_w

    y_t = _lower_matvec(D, inc, T)
    g_alpha = 0.0
    g_size = 0.0
    back_d = np.zeros(T)
    for t in range(T):
        y = alpha * y_t[t]
        lpt, d_y, d_k = nb_term(cases[t], y, inv_phi, lg_cases[t])
        lp += lpt
        g_alpha += d_y * y
        g_size += d_k
        back_d[t] = d_y * alpha
    g_ip = inv_phi * g_size

    for k in range(nI):
        s = 0.0
        for t in range(T):
            s += G[t, k] * back[t] + D[t, k] * back_d[t]
        gx[k] += inc[k] * s

    # positive scalars: natural-scale density plus log Jacobian
    lp += _normal_lp(sigma, mu_sig, sd_sig) + log_sigma
    g_sigma += 1.0 - sigma * (sigma - mu_sig) / sd_sig**2
    lp += _normal_lp(psi, mu_psi, sd_psi) + log_psi
    g_psi += 1.0 - psi * (psi - mu_psi) / sd_psi**2
    lp += _normal_lp(alpha, mu_a, sd_a) + log_alpha
    g_alpha += 1.0 - alpha * (alpha - mu_a) / sd_a**2
    lp += _normal_lp(inv_phi, mu_ip, sd_ip) + log_ip
    g_ip += 1.0 - inv_phi * (inv_phi - mu_ip) / sd_ip**2

    grad[nI + T] = g_sigma
    grad[nI + T + 1] = g_psi
    grad[nI + T + 2] = g_alpha
    grad[nI + T + 3] = g_ip
    grad[nI + T + 4] = g_lam
    return lp, grad


@njit(cache=True, error_model="numpy")
def spline_nb_model(theta, data):
    """Negative-binomial regression on a penalized spline in mixed-model form.

    The log mean is ``offset + Xf @ b + tau * Zr @ z`` where ``Xf`` spans
    the unpenalized null space of the smoothing penalty and ``Zr`` its
    eigen-scaled penalized part.  theta = [b (p), z (q), log_tau, log_kappa].
    Priors: b ~ N(0, 5^2); z ~ N(0, 1); tau ~ half-normal(tau_scale);
    kappa ~ Gamma(a, b) (shape, rate).
    """
    Xf, Zr, y, lg_y, offset, tau_scale, k_shape, k_rate = data
    p = Xf.shape[1]
    q = Zr.shape[1]
    N = Xf.shape[0]
    log_tau = theta[p + q]
    log_kappa = theta[p + q + 1]
    tau = math.exp(log_tau)
    kappa = math.exp(log_kappa)

    grad = np.zeros(theta.size)
    lp = 0.0
    g_kappa = 0.0
    g_tau = 0.0
    for i in range(N):
        fixed = offset
        for j in range(p):
            fixed += Xf[i, j] * theta[j]
        rand = 0.0
        for j in range(q):
            rand += Zr[i, j] * theta[p + j]
        mu = math.exp(fixed + tau * rand)
        lpi, d_mu, d_k = nb_term(y[i], mu, kappa, lg_y[i])
        lp += lpi
        g_kappa += d_k
        d_eta = d_mu * mu
        for j in range(p):
            grad[j] += d_eta * Xf[i, j]
        for j in range(q):
            grad[p + j] += d_eta * tau * Zr[i, j]
        g_tau += d_eta * rand

    for j in range(p):
        lp += _normal_lp(theta[j], 0.0, 5.0)
        grad[j] -= theta[j] / 25.0
    for j in range(q):
        lp += -0.5 * LOG_2PI - 0.5 * theta[p + j] * theta[p + j]
        grad[p + j] -= theta[p + j]
    # half-normal tau + Jacobian
    lp += _normal_lp(tau, 0.0, tau_scale) + math.log(2.0) + log_tau
    grad[p + q] = g_tau * tau + 1.0 - tau * tau / tau_scale**2
    # gamma prior on kappa + Jacobian
    lp += k_shape * math.log(k_rate) - math.lgamma(k_shape) + k_shape * log_kappa - k_rate * kappa
    grad[p + q + 1] = g_kappa * kappa + k_shape - k_rate * kappa
    return lp, grad


# --------------------------------------------------------------------------
# non-centred random walk
#
# Sampling coordinates replace log R_2..log R_T by standardized innovations
# w_t = (log R_t - log R_{t-1}) / s with step sd s = exp(log_sigma) * scale.
# The log density gains the log-Jacobian (T - 1) log s.


@njit(cache=True, error_model="numpy")
def walk_to_centered(theta, nI, T, sig_idx, scale):
    out = theta.copy()
    s = math.exp(theta[sig_idx]) * scale
    for t in range(1, T):
        out[nI + t] = out[nI + t - 1] + s * theta[nI + t]
    return out


@njit(cache=True, error_model="numpy")
def walk_to_noncentered(theta, nI, T, sig_idx, scale):
    out = theta.copy()
    s = math.exp(theta[sig_idx]) * scale
    for t in range(1, T):
        out[nI + t] = (theta[nI + t] - theta[nI + t - 1]) / s
    return out


@njit(cache=True, error_model="numpy")
def _noncentered(lp, g, theta, nI, T, sig_idx, scale):
    s = math.exp(theta[sig_idx]) * scale
    out = g.copy()
    # d log R_t / d w_u = s for u <= t (u >= 1); d log R_t / d w_0 = 1
    acc = 0.0
    for t in range(T - 1, 0, -1):
        acc += g[nI + t]
        out[nI + t] = s * acc
    out[nI] = acc + g[nI]
    # d log R_t / d log s = s * sum_{u=1..t} w_u = log R_t - log R_0
    d_ls = 0.0
    cum = 0.0
    for t in range(1, T):
        cum += s * theta[nI + t]
        d_ls += g[nI + t] * cum
    out[sig_idx] += d_ls + (T - 1)
    return lp + (T - 1) * math.log(s), out


@njit(cache=True, error_model="numpy")
def gamma_model_nc(theta, data):
    n, T = data[0], data[1]
    nI = n + T
    sig_idx = nI + T + 1
    scale = 1.0 / math.sqrt(T - 1.0)
    lp, g = gamma_model(walk_to_centered(theta, nI, T, sig_idx, scale), data)
    return _noncentered(lp, g, theta, nI, T, sig_idx, scale)


@njit(cache=True, error_model="numpy")
def normal_model_nc(theta, data):
    n, T = data[0], data[1]
    nI = n + T
    sig_idx = nI + T
    lp, g = normal_model(walk_to_centered(theta, nI, T, sig_idx, 1.0), data)
    return _noncentered(lp, g, theta, nI, T, sig_idx, 1.0)
