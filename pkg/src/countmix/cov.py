"""Random-effect covariance parameterization.

Variances live on the log-sd scale.  The correlation matrix comes from the
scaled-Cholesky map: a lower-triangular matrix with implicit unit diagonal is
filled from unconstrained entries, each row is normalized to unit Euclidean
norm, and Corr = L L'.  The map is total and smooth, so any finite input
yields a valid positive-definite covariance.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


def n_pairs(r):
    return r * (r - 1) // 2


@dataclass(frozen=True)
class CovSpec:
    """Unconstrained coordinates of the random-effect covariance."""

    log_sd: np.ndarray
    corr_raw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "log_sd", np.asarray(self.log_sd, dtype=np.float64))
        object.__setattr__(
            self, "corr_raw", np.asarray(self.corr_raw, dtype=np.float64)
        )
        if self.corr_raw.size != n_pairs(self.log_sd.size):
            raise ValueError(
                f"corr_raw must have r(r-1)/2 = {n_pairs(self.log_sd.size)} entries"
            )

    @property
    def r(self):
        return self.log_sd.size


def corr_chol(corr_raw, r):
    """Row-normalized lower-triangular factor L with Corr = L L'."""
    L = np.eye(r)
    rows, cols = np.tril_indices(r, -1)
    L[rows, cols] = corr_raw
    L /= np.sqrt(np.sum(L * L, axis=1))[:, None]
    return L


def build_sigma(spec):
    """(Sigma, Corr) from unconstrained coordinates."""
    L = corr_chol(spec.corr_raw, spec.r)
    corr = L @ L.T
    sd = np.exp(spec.log_sd)
    sigma = corr * np.outer(sd, sd)
    return sigma, corr


def raw_from_corr(corr):
    """Invert the scaled-Cholesky map; corr must be a valid correlation matrix."""
    L = np.linalg.cholesky(corr)
    rows, cols = np.tril_indices(L.shape[0], -1)
    return L[rows, cols] / np.diag(L)[rows]


def corr_from_raw_jacobian(spec):
    """Jacobian of (sd_1..sd_r, rho_21, rho_31, ...) w.r.t. (log_sd, corr_raw).

    Pair order matches np.tril_indices(r, -1).  The block structure is
    diagonal: sd depends only on log_sd, rho only on corr_raw.
    """
    r = spec.r
    m = n_pairs(r)
    J = np.zeros((r + m, r + m))
    J[:r, :r] = np.diag(np.exp(spec.log_sd))

    L = np.eye(r)
    rows, cols = np.tril_indices(r, -1)
    L[rows, cols] = spec.corr_raw
    norms = np.sqrt(np.sum(L * L, axis=1))
    U = L / norms[:, None]

    # raw coordinate index for entry (i, l), l < i
    raw_pos = {}
    for p, (i, l) in enumerate(zip(rows, cols)):
        raw_pos[(i, l)] = p

    for p, (i, j) in enumerate(zip(rows, cols)):
        rho = U[i] @ U[j]
        # d rho / d raw entries in row i, then in row j
        for row, other in ((i, j), (j, i)):
            for l in range(row):
                q = raw_pos[(row, l)]
                J[r + p, r + q] = (U[other, l] - rho * U[row, l]) / norms[row]
    return J


def mvn_logpdf(b, sigma):
    """Zero-mean multivariate normal log-density; b is (k,) or (n, k)."""
    squeeze = np.ndim(b) == 1
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    k = sigma.shape[0]
    chol = np.linalg.cholesky(sigma)
    w = solve_triangular(chol, b.T, lower=True).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (k * math.log(2.0 * math.pi) + logdet + np.sum(w * w, axis=1))
    return float(out[0]) if squeeze else out


def mvn_sample(sigma, rng, size):
    """Draws from N(0, sigma) via the Cholesky factor; returns (size, k)."""
    chol = np.linalg.cholesky(sigma)
    z = rng.standard_normal((size, sigma.shape[0]))
    return z @ chol.T
