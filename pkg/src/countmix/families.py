"""Conditional count families: Poisson, NB2, and mean-parameterized COM-Poisson.

The COM-Poisson pmf is lambda^y / (y!)^nu / Z(lambda, nu); here it is
reparameterized so that the distribution's mean equals mu, with the rate
solved numerically per evaluation.  nu < 1 gives overdispersion, nu > 1
underdispersion, nu = 1 collapses to Poisson.  NB2 uses the quadratic
variance mu + mu^2/phi.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels


class SeriesError(RuntimeError):
    """The COM-Poisson series or rate solve failed to converge."""


class Family(enum.Enum):
    """Conditional distribution of a count response given its random effect."""

    POISSON = "poisson"
    NEGBIN2 = "nb"
    CMP_MU = "cmp"

    @property
    def has_dispersion(self):
        return self is not Family.POISSON

    @property
    def dispersion_name(self):
        return {Family.NEGBIN2: "phi", Family.CMP_MU: "nu"}.get(self)

    @classmethod
    def from_string(cls, s):
        key = s.strip().lower()
        aliases = {
            "poisson": cls.POISSON,
            "nb": cls.NEGBIN2,
            "negbin2": cls.NEGBIN2,
            "cmp": cls.CMP_MU,
            "compoisson": cls.CMP_MU,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown family {s!r}; use poisson|nb|cmp") from None


@dataclass(frozen=True)
class CmpSeriesControl:
    """Truncation control for COM-Poisson series sums."""

    rel_tol: float = 1e-12
    max_terms: int = 10000

    def __post_init__(self):
        if self.rel_tol <= 0 or self.max_terms <= 0:
            raise ValueError("rel_tol and max_terms must be positive")


DEFAULT_CMP_CONTROL = CmpSeriesControl()


def _check_disp(family, disp):
    if family.has_dispersion:
        if disp is None:
            raise ValueError(f"{family.value} requires a dispersion parameter")
        if not np.all(np.asarray(disp) > 0):
            raise ValueError("dispersion must be positive")
    elif disp is not None:
        raise ValueError("Poisson carries no dispersion parameter")


def _raise_series(status):
    if np.any(status == kernels.CMP_SERIES_DIVERGED):
        raise SeriesError("CMP series did not meet rel_tol within max_terms")
    if np.any(status == kernels.CMP_RATE_NO_CONVERGE):
        raise SeriesError("CMP rate solve did not converge")


def eval_eta(family, y, eta, disp=None, t_warm=None, ctrl=DEFAULT_CMP_CONTROL):
    """Log-pmf and its first two derivatives in eta = log(mu).

    Returns (logpmf, d1, d2, t) arrays; t is the solved CMP log-rate (reusable
    as a warm start) and None for the closed-form families.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    eta = np.ascontiguousarray(eta, dtype=np.float64)
    if family is Family.POISSON:
        logpmf, d1, d2 = kernels.poisson_eval(y, eta)
        return logpmf, d1, d2, None
    if family is Family.NEGBIN2:
        logpmf, d1, d2 = kernels.nb2_eval(y, eta, float(disp))
        return logpmf, d1, d2, None
    if t_warm is None:
        t_warm = np.full(eta.shape, np.nan)
    t_warm = np.ascontiguousarray(t_warm, dtype=np.float64)
    logpmf, d1, d2, t, status = kernels.cmp_eval(
        y, eta, float(disp), t_warm, ctrl.rel_tol, ctrl.max_terms
    )
    _raise_series(status)
    return logpmf, d1, d2, t


def log_pmf(family, y, mu, disp=None, ctrl=DEFAULT_CMP_CONTROL):
    """log f(y | mu, dispersion) for the given family; vectorized over y/mu."""
    _check_disp(family, disp)
    mu_arr = np.asarray(mu, dtype=np.float64)
    if not np.all(mu_arr > 0):
        raise ValueError("mu must be positive")
    y_arr, mu_arr = np.broadcast_arrays(np.asarray(y, dtype=np.float64), mu_arr)
    out, _, _, _ = eval_eta(
        family, y_arr.ravel(), np.log(mu_arr.ravel()), disp=disp, ctrl=ctrl
    )
    out = out.reshape(mu_arr.shape)
    return float(out) if np.isscalar(mu) and np.isscalar(y) else out


def cmp_solve_rate(mu, nu, ctrl=DEFAULT_CMP_CONTROL):
    """Rate lambda such that the CMP(lambda, nu) series mean equals mu."""
    scalar = np.isscalar(mu)
    mu_arr = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    if not (np.all(mu_arr > 0) and nu > 0):
        raise ValueError("mu and nu must be positive")
    t0 = kernels.cmp_rate_init_np(mu_arr, nu)
    t, _, _, _, _, status = kernels.cmp_solve_t(
        np.ascontiguousarray(mu_arr), float(nu), np.ascontiguousarray(t0),
        ctrl.rel_tol, ctrl.max_terms,
    )
    _raise_series(status)
    lam = np.exp(t)
    return float(lam[0]) if scalar else lam


def cmp_log_norm_const(lam, nu, ctrl=DEFAULT_CMP_CONTROL):
    """log sum_y lambda^y / (y!)^nu, accumulated stably in log space."""
    scalar = np.isscalar(lam)
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if not (np.all(lam_arr > 0) and nu > 0):
        raise ValueError("lambda and nu must be positive")
    logz, _, _, _, status = kernels.cmp_stats(
        np.ascontiguousarray(np.log(lam_arr)), float(nu), ctrl.rel_tol, ctrl.max_terms
    )
    _raise_series(status)
    return float(logz[0]) if scalar else logz


def cmp_series_stats(lam, nu, ctrl=DEFAULT_CMP_CONTROL):
    """(logz, mean, var, k3) of CMP(lambda, nu) computed from truncated sums."""
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    logz, mean, var, k3, status = kernels.cmp_stats(
        np.ascontiguousarray(np.log(lam_arr)), float(nu), ctrl.rel_tol, ctrl.max_terms
    )
    _raise_series(status)
    if np.isscalar(lam):
        return float(logz[0]), float(mean[0]), float(var[0]), float(k3[0])
    return logz, mean, var, k3


def sample(family, mu, disp=None, rng=None, size=None, ctrl=DEFAULT_CMP_CONTROL):
    """Draw counts from the family at mean mu.

    NB2 uses the gamma-Poisson mixture; CMP inverts the cdf of the truncated
    series.  mu may be an array, in which case one draw per element is made
    and `size` must be None.
    """
    _check_disp(family, disp)
    if rng is None:
        rng = np.random.default_rng()
    mu_arr = np.asarray(mu, dtype=np.float64)
    if size is not None:
        if mu_arr.ndim != 0:
            raise ValueError("size is only valid with scalar mu")
        mu_arr = np.full(size, float(mu_arr))
    if not np.all(mu_arr > 0):
        raise ValueError("mu must be positive")
    if family is Family.POISSON:
        return rng.poisson(mu_arr)
    if family is Family.NEGBIN2:
        lam = rng.gamma(shape=disp, scale=mu_arr / disp)
        return rng.poisson(lam)
    flat = np.ascontiguousarray(mu_arr.ravel())
    t0 = kernels.cmp_rate_init_np(flat, disp)
    t, _, _, _, _, status = kernels.cmp_solve_t(
        flat, float(disp), np.ascontiguousarray(t0), ctrl.rel_tol, ctrl.max_terms
    )
    _raise_series(status)
    u = rng.random(flat.size)
    draws = kernels.cmp_cdf_invert(u, t, float(disp), ctrl.rel_tol, ctrl.max_terms)
    return draws.reshape(mu_arr.shape)
