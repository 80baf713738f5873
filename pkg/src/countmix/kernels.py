"""Hot numeric kernels: count-family evaluations and COM-Poisson series sums.

Every kernel exists twice: a pure-numpy implementation (suffix ``_np``) and a
numba ``@njit`` version (suffix ``_nb``).  The module-level names
(``poisson_eval``, ``cmp_eval``, ...) dispatch to whichever backend is active.
Set ``COUNTMIX_BACKEND=numpy`` to force the fallback; anything else (or an
absent numba) resolves automatically.

Both paths run the same term-by-term recurrences in the same per-element
order, so they agree to floating-point roundoff; ``benchmarks/bench_kernels.py``
compares their speed.
"""

import math
import os

import numpy as np
from scipy.special import gammaln

_ENV_FLAG = "COUNTMIX_BACKEND"

# Failure codes reported by the CMP kernels (0 = ok).
CMP_OK = 0
CMP_SERIES_DIVERGED = 1
CMP_RATE_NO_CONVERGE = 2

# Newton solve for the CMP log-rate: |series mean - mu| tolerance, iteration
# cap, and a step clamp that keeps the first iterations from a bad init sane.
# The tolerance sits two decades under the documented 1e-10 mean contract so
# that inner-mode gradients built from the solved rate stay clean.
RATE_TOL = 1e-12
RATE_MAX_ITER = 100
RATE_MAX_STEP = 5.0


# ---------------------------------------------------------------------------
# Pure-numpy backend
# ---------------------------------------------------------------------------


def poisson_eval_np(y, eta):
    """Log-pmf and first/second derivatives in eta for y ~ Poisson(exp(eta))."""
    mu = np.exp(eta)
    logpmf = y * eta - mu - gammaln(y + 1.0)
    return logpmf, y - mu, -mu


def nb2_eval_np(y, eta, phi):
    """Log-pmf and eta-derivatives for NB2 with variance mu + mu^2/phi.

    Written with log1p so the phi -> inf Poisson limit holds to roundoff.
    """
    mu = np.exp(eta)
    lp1 = np.log1p(mu / phi)
    logpmf = (
        gammaln(y + phi)
        - gammaln(phi)
        - gammaln(y + 1.0)
        - phi * lp1
        + y * (eta - math.log(phi) - lp1)
    )
    d1 = y - mu * (y + phi) / (phi + mu)
    d2 = -mu * phi * (y + phi) / (phi + mu) ** 2
    return logpmf, d1, d2


def cmp_stats_np(t, nu, rel_tol, max_terms):
    """Normalizing sum and first three central moments of CMP(exp(t), nu).

    All sums run in log space with running-maximum rescaling; a series stops
    once its term is decreasing and contributes less than rel_tol of the
    running sum.  Returns (logz, mean, var, k3, status) over the t array.
    """
    t = np.asarray(t, dtype=np.float64)
    n = t.size
    m = np.zeros(n)
    s0 = np.ones(n)
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    s3 = np.zeros(n)
    prev = np.zeros(n)
    status = np.full(n, CMP_SERIES_DIVERGED, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for y in range(1, max_terms):
        lt = y * t - nu * math.lgamma(y + 1.0)
        grow = active & (lt > m)
        if grow.any():
            c = np.exp(m[grow] - lt[grow])
            s0[grow] *= c
            s1[grow] *= c
            s2[grow] *= c
            s3[grow] *= c
            m[grow] = lt[grow]
        w = np.where(active, np.exp(lt - m), 0.0)
        s0 += w
        s1 += y * w
        s2 += (y * y) * w
        s3 += (y * y * y) * w
        done = active & (lt < prev) & (w < rel_tol * s0)
        status[done] = CMP_OK
        active &= ~done
        if not active.any():
            break
        prev = np.where(active, lt, prev)
    mean = s1 / s0
    var = s2 / s0 - mean * mean
    k3 = s3 / s0 - 3.0 * mean * (s2 / s0) + 2.0 * mean**3
    logz = m + np.log(s0)
    return logz, mean, var, k3, status


def cmp_rate_init_np(mu, nu):
    """Starting log-rate from the classic mean approximation, clipped at 1e-8."""
    base = mu + (nu - 1.0) / (2.0 * nu)
    lam0 = np.where(base > 0.0, base, 1e-8) ** nu
    return np.log(np.maximum(lam0, 1e-8))


def cmp_solve_t_np(mu, nu, t0, rel_tol, max_terms):
    """Newton in t = log(lambda) until the series mean matches mu to 1e-10.

    Returns (t, logz, mean, var, k3, status); the series stats are the ones
    already computed at the accepted t, so callers need no extra pass.
    """
    mu = np.asarray(mu, dtype=np.float64)
    t = np.array(t0, dtype=np.float64, copy=True)
    n = mu.size
    logz = np.empty(n)
    mean = np.empty(n)
    var = np.empty(n)
    k3 = np.empty(n)
    status = np.full(n, CMP_RATE_NO_CONVERGE, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for _ in range(RATE_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        lz, mn, vr, kk, st = cmp_stats_np(t[idx], nu, rel_tol, max_terms)
        logz[idx], mean[idx], var[idx], k3[idx] = lz, mn, vr, kk
        bad = st != CMP_OK
        if bad.any():
            status[idx[bad]] = CMP_SERIES_DIVERGED
            active[idx[bad]] = False
            idx = idx[~bad]
            mn, vr = mn[~bad], vr[~bad]
            if idx.size == 0:
                continue
        err = mn - mu[idx]
        hit = np.abs(err) <= RATE_TOL
        status[idx[hit]] = CMP_OK
        active[idx[hit]] = False
        move = ~hit
        step = np.clip(err[move] / vr[move], -RATE_MAX_STEP, RATE_MAX_STEP)
        t[idx[move]] -= step
    return t, logz, mean, var, k3, status


def cmp_eval_np(y, eta, nu, t_warm, rel_tol, max_terms):
    """Mean-parameterized CMP log-pmf plus eta-derivatives.

    t_warm holds previous log-rates (NaN where unknown); the solved values are
    returned for reuse on the next call at nearby eta.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.exp(np.asarray(eta, dtype=np.float64))
    t0 = np.where(np.isfinite(t_warm), t_warm, cmp_rate_init_np(mu, nu))
    t, logz, _, var, k3, status = cmp_solve_t_np(mu, nu, t0, rel_tol, max_terms)
    logpmf = y * t - nu * gammaln(y + 1.0) - logz
    d1 = (y - mu) * mu / var
    d2 = -mu * mu / var + (y - mu) * mu * (var * var - mu * k3) / var**3
    return logpmf, d1, d2, t, status


def cmp_cdf_invert_np(u, t, nu, rel_tol, max_terms):
    """Draw CMP variates by walking the cdf until it exceeds each uniform u."""
    logz, _, _, _, _ = cmp_stats_np(t, nu, rel_tol, max_terms)
    out = np.zeros(u.size, dtype=np.int64)
    cum = np.exp(-logz)
    undecided = cum < u
    y = 0
    while undecided.any() and y < max_terms:
        y += 1
        cum = cum + np.exp(y * t - nu * math.lgamma(y + 1.0) - logz)
        newly = undecided & (cum >= u)
        out[newly] = y
        undecided &= ~newly
    out[undecided] = y
    return out


# ---------------------------------------------------------------------------
# numba backend: scalar cores, element loops at module level so cache=True
# and fork-based multiprocessing both work.
# ---------------------------------------------------------------------------

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _cmp_stats_scalar(t, nu, rel_tol, max_terms):
        m = 0.0
        s0 = 1.0
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        prev = 0.0
        status = CMP_SERIES_DIVERGED
        for y in range(1, max_terms):
            lt = y * t - nu * math.lgamma(y + 1.0)
            if lt > m:
                c = math.exp(m - lt)
                s0 *= c
                s1 *= c
                s2 *= c
                s3 *= c
                m = lt
            w = math.exp(lt - m)
            s0 += w
            s1 += y * w
            s2 += (y * y) * w
            s3 += (y * y * y) * w
            if lt < prev and w < rel_tol * s0:
                status = CMP_OK
                break
            prev = lt
        mean = s1 / s0
        var = s2 / s0 - mean * mean
        k3 = s3 / s0 - 3.0 * mean * (s2 / s0) + 2.0 * mean**3
        return m + math.log(s0), mean, var, k3, status

    @njit(cache=True, nogil=True)
    def _cmp_solve_t_scalar(mu, nu, t0, rel_tol, max_terms):
        t = t0
        logz = 0.0
        mean = 0.0
        var = 1.0
        k3 = 0.0
        for _ in range(RATE_MAX_ITER):
            logz, mean, var, k3, st = _cmp_stats_scalar(t, nu, rel_tol, max_terms)
            if st != CMP_OK:
                return t, logz, mean, var, k3, CMP_SERIES_DIVERGED
            err = mean - mu
            if abs(err) <= RATE_TOL:
                return t, logz, mean, var, k3, CMP_OK
            step = err / var
            if step > RATE_MAX_STEP:
                step = RATE_MAX_STEP
            elif step < -RATE_MAX_STEP:
                step = -RATE_MAX_STEP
            t -= step
        return t, logz, mean, var, k3, CMP_RATE_NO_CONVERGE

    @njit(cache=True, nogil=True)
    def poisson_eval_nb(y, eta):
        n = eta.size
        logpmf = np.empty(n)
        d1 = np.empty(n)
        d2 = np.empty(n)
        for i in range(n):
            mu = math.exp(eta[i])
            logpmf[i] = y[i] * eta[i] - mu - math.lgamma(y[i] + 1.0)
            d1[i] = y[i] - mu
            d2[i] = -mu
        return logpmf, d1, d2

    @njit(cache=True, nogil=True)
    def nb2_eval_nb(y, eta, phi):
        n = eta.size
        logpmf = np.empty(n)
        d1 = np.empty(n)
        d2 = np.empty(n)
        lgphi = math.lgamma(phi)
        logphi = math.log(phi)
        for i in range(n):
            mu = math.exp(eta[i])
            lp1 = math.log1p(mu / phi)
            logpmf[i] = (
                math.lgamma(y[i] + phi)
                - lgphi
                - math.lgamma(y[i] + 1.0)
                - phi * lp1
                + y[i] * (eta[i] - logphi - lp1)
            )
            d1[i] = y[i] - mu * (y[i] + phi) / (phi + mu)
            d2[i] = -mu * phi * (y[i] + phi) / (phi + mu) ** 2
        return logpmf, d1, d2

    @njit(cache=True, nogil=True)
    def cmp_stats_nb(t, nu, rel_tol, max_terms):
        n = t.size
        logz = np.empty(n)
        mean = np.empty(n)
        var = np.empty(n)
        k3 = np.empty(n)
        status = np.empty(n, dtype=np.int64)
        for i in range(n):
            logz[i], mean[i], var[i], k3[i], status[i] = _cmp_stats_scalar(
                t[i], nu, rel_tol, max_terms
            )
        return logz, mean, var, k3, status

    @njit(cache=True, nogil=True)
    def cmp_solve_t_nb(mu, nu, t0, rel_tol, max_terms):
        n = mu.size
        t = np.empty(n)
        logz = np.empty(n)
        mean = np.empty(n)
        var = np.empty(n)
        k3 = np.empty(n)
        status = np.empty(n, dtype=np.int64)
        for i in range(n):
            t[i], logz[i], mean[i], var[i], k3[i], status[i] = _cmp_solve_t_scalar(
                mu[i], nu, t0[i], rel_tol, max_terms
            )
        return t, logz, mean, var, k3, status

    @njit(cache=True, nogil=True)
    def cmp_eval_nb(y, eta, nu, t_warm, rel_tol, max_terms):
        n = eta.size
        logpmf = np.empty(n)
        d1 = np.empty(n)
        d2 = np.empty(n)
        t_out = np.empty(n)
        status = np.empty(n, dtype=np.int64)
        for i in range(n):
            mu = math.exp(eta[i])
            t0 = t_warm[i]
            if not math.isfinite(t0):
                base = mu + (nu - 1.0) / (2.0 * nu)
                if base <= 0.0:
                    base = 1e-8
                lam0 = base**nu
                if lam0 < 1e-8:
                    lam0 = 1e-8
                t0 = math.log(lam0)
            t, logz, _, var, k3, st = _cmp_solve_t_scalar(
                mu, nu, t0, rel_tol, max_terms
            )
            t_out[i] = t
            status[i] = st
            logpmf[i] = y[i] * t - nu * math.lgamma(y[i] + 1.0) - logz
            d1[i] = (y[i] - mu) * mu / var
            d2[i] = -mu * mu / var + (y[i] - mu) * mu * (var * var - mu * k3) / var**3
        return logpmf, d1, d2, t_out, status

    @njit(cache=True, nogil=True)
    def cmp_cdf_invert_nb(u, t, nu, rel_tol, max_terms):
        out = np.zeros(u.size, dtype=np.int64)
        for i in range(u.size):
            logz, _, _, _, _ = _cmp_stats_scalar(t[i], nu, rel_tol, max_terms)
            cum = math.exp(-logz)
            y = 0
            while cum < u[i] and y < max_terms:
                y += 1
                cum += math.exp(y * t[i] - nu * math.lgamma(y + 1.0) - logz)
            out[i] = y
        return out


def _resolve_backend():
    want = os.environ.get(_ENV_FLAG, "").strip().lower()
    if want == "numpy" or not _HAVE_NUMBA:
        if want == "numba" and not _HAVE_NUMBA:
            raise ImportError("COUNTMIX_BACKEND=numba requested but numba is missing")
        return "numpy"
    return "numba"


BACKEND = _resolve_backend()

if BACKEND == "numba":
    poisson_eval = poisson_eval_nb
    nb2_eval = nb2_eval_nb
    cmp_stats = cmp_stats_nb
    cmp_solve_t = cmp_solve_t_nb
    cmp_eval = cmp_eval_nb
    cmp_cdf_invert = cmp_cdf_invert_nb
else:
    poisson_eval = poisson_eval_np
    nb2_eval = nb2_eval_np
    cmp_stats = cmp_stats_np
    cmp_solve_t = cmp_solve_t_np
    cmp_eval = cmp_eval_np
    cmp_cdf_invert = cmp_cdf_invert_np


def backend_name():
    """Active kernel backend, 'numba' or 'numpy'."""
    return BACKEND
