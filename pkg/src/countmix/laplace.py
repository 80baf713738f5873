"""Per-subject Newton maximization of the joint log-density and the
Laplace-approximated marginal log-likelihood.

Each subject's random-effect vector is maximized independently (the joint
factorizes over subjects), with monotone step halving and Levenberg damping
when the inner Hessian loses definiteness.  The marginal value adds the
(k/2) log 2pi - 0.5 log det H correction per subject, so the sigma -> 0 limit
reproduces the fixed-effects GLM log-likelihood exactly.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .cov import build_sigma
from .families import DEFAULT_CMP_CONTROL, Family, eval_eta
from .model import ModelMatrices

LN_2PI = math.log(2.0 * math.pi)


class InnerSolveError(RuntimeError):
    """At least one subject mode failed to converge."""


@dataclass(frozen=True)
class LaplaceControl:
    inner_tol: float = 1e-8
    inner_max_iter: int = 50
    max_step_halving: int = 30

    def __post_init__(self):
        if min(self.inner_tol, self.inner_max_iter, self.max_step_halving) <= 0:
            raise ValueError("LaplaceControl fields must be positive")


@dataclass
class LaplaceState:
    """Subject modes, inner Hessians, and reusable caches."""

    b: np.ndarray  # (n, k) modes
    neg_hess: np.ndarray  # (n, k, k) negative joint Hessian at the mode
    converged: np.ndarray  # (n,) bool
    joint: np.ndarray  # (n,) joint log-density at the mode
    logdet: np.ndarray  # (n,) log det of neg_hess
    t_cmp: np.ndarray | None  # (n, k) cached CMP log-rates

    def copy(self):
        return LaplaceState(
            b=self.b.copy(),
            neg_hess=self.neg_hess.copy(),
            converged=self.converged.copy(),
            joint=self.joint.copy(),
            logdet=self.logdet.copy(),
            t_cmp=None if self.t_cmp is None else self.t_cmp.copy(),
        )


def _eval_joint(spec, params, design, sigma_chol, b, t_warm, rows, ctrl):
    """Joint value, gradient, and curvature for the given subject rows.

    Returns (value (m,), grad (m,k), curv (m,k), t_new) where grad/curv are the
    derivatives of sum_r log f in each b_ir; the prior part is added by the
    caller.  curv holds the conditional second derivatives only.
    """
    eta = b.copy()
    for j in range(design.k):
        eta[:, j] += design.X[j][rows] @ params.beta[j]
    val = np.zeros(b.shape[0])
    grad = np.empty_like(b)
    curv = np.empty_like(b)
    t_new = None if t_warm is None else np.empty_like(b)
    for j in range(design.k):
        disp = None if params.disp is None else params.disp[j]
        warm_j = None if t_warm is None else t_warm[:, j]
        lp, d1, d2, t = eval_eta(
            spec.family, design.Y[rows, j], eta[:, j], disp=disp, t_warm=warm_j,
            ctrl=ctrl,
        )
        val += lp
        grad[:, j] = d1
        curv[:, j] = d2
        if t is not None:
            t_new[:, j] = t
    # zero-mean MVN log-density via the prior Cholesky factor
    w = solve_triangular(sigma_chol, b.T, lower=True).T
    logdet_sigma = 2.0 * np.sum(np.log(np.diag(sigma_chol)))
    val += -0.5 * (design.k * LN_2PI + logdet_sigma + np.sum(w * w, axis=1))
    return val, grad, curv, t_new


def _chol_with_damping(H):
    """Batched Cholesky; non-PD blocks get tau*I added (tau doubling from 1e-8).

    Returns (chol, H_used).
    """
    try:
        return np.linalg.cholesky(H), H
    except np.linalg.LinAlgError:
        pass
    H = H.copy()
    chol = np.empty_like(H)
    for i in range(H.shape[0]):
        tau = 0.0
        while True:
            try:
                chol[i] = np.linalg.cholesky(H[i] + tau * np.eye(H.shape[1]))
                H[i] = H[i] + tau * np.eye(H.shape[1])
                break
            except np.linalg.LinAlgError:
                tau = 1e-8 if tau == 0.0 else 2.0 * tau
                if tau > 1e16:
                    raise InnerSolveError("inner Hessian could not be damped to PD")
    return chol, H


def inner_solve(spec, params, data, warm=None, ctrl=LaplaceControl(),
                cmp_ctrl=DEFAULT_CMP_CONTROL):
    """Newton modes of the joint log-density for every subject.

    Warm starts from `warm` when given, else zero.  Per-subject failure is
    recorded in the converged flags, not raised.
    """
    design = data if isinstance(data, ModelMatrices) else ModelMatrices(spec, data)
    n, k = design.n, design.k
    sigma, _ = build_sigma(params.cov)
    sigma_chol = np.linalg.cholesky(sigma)
    eye = np.eye(k)
    sigma_inv = solve_triangular(
        sigma_chol.T, solve_triangular(sigma_chol, eye, lower=True), lower=False
    )

    if warm is not None:
        b = warm.b.copy()
        t_warm = None if warm.t_cmp is None else warm.t_cmp.copy()
    else:
        b = np.zeros((n, k))
        t_warm = (
            np.full((n, k), np.nan) if spec.family is Family.CMP_MU else None
        )

    all_rows = np.arange(n)
    val, grad_f, curv, t_new = _eval_joint(
        spec, params, design, sigma_chol, b, t_warm, all_rows, cmp_ctrl
    )
    if t_new is not None:
        t_warm = t_new
    grad = grad_f - b @ sigma_inv
    gnorm = np.max(np.abs(grad), axis=1)
    # Polish well past the contract tolerance (one extra Newton step under
    # quadratic convergence): the marginal's log-det term is first-order in
    # the mode error, and outer finite differences need that noise gone.  The
    # CMP gradient cannot beat the rate-solve tolerance, so its floor is higher.
    polish_tol = 1e-4 * ctrl.inner_tol
    if spec.family is Family.CMP_MU:
        polish_tol = max(polish_tol, 1e-10)
    polished = gnorm <= polish_tol
    stalled = np.zeros(n, dtype=bool)

    # Per-subject floating-point noise floor of the joint value: large counts
    # put terms of magnitude ~ y*eta + lgamma(y+1) into the sum, so genuine
    # improvements below eps times that scale are invisible to a value test.
    eta0 = b.copy()
    for j in range(k):
        eta0[:, j] += design.X[j] @ params.beta[j]
    big = np.sum(
        np.abs(design.Y * eta0) + design.Y + gammaln(design.Y + 1.0), axis=1
    )
    val_slack = 1e-12 + 64.0 * np.finfo(float).eps * big

    for _ in range(ctrl.inner_max_iter):
        active = ~(polished | stalled)
        if not active.any():
            break
        rows = np.flatnonzero(active)
        H = sigma_inv + (-curv[rows])[:, :, None] * eye  # diag(-curv) + prior precision
        _, H = _chol_with_damping(H)
        delta = np.linalg.solve(H, grad[rows][:, :, None])[:, :, 0]

        step = np.ones(rows.size)
        remaining = np.arange(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        for _ in range(ctrl.max_step_halving):
            if remaining.size == 0:
                break
            trial_rows = rows[remaining]
            b_try = b[trial_rows] + step[remaining, None] * delta[remaining]
            tw = None if t_warm is None else t_warm[trial_rows]
            v_try, g_try, c_try, t_try = _eval_joint(
                spec, params, design, sigma_chol, b_try, tw, trial_rows, cmp_ctrl
            )
            gn_try = np.max(np.abs(g_try - b_try @ sigma_inv), axis=1)
            better = (v_try >= val[trial_rows] - val_slack[trial_rows]) | (
                gn_try <= 0.5 * gnorm[trial_rows]
            )
            ok = remaining[better]
            if ok.size:
                ok_rows = rows[ok]
                b[ok_rows] = b[ok_rows] + step[ok, None] * delta[ok]
                val[ok_rows] = v_try[better]
                grad_f[ok_rows] = g_try[better]
                curv[ok_rows] = c_try[better]
                if t_try is not None:
                    t_warm[ok_rows] = t_try[better]
                accepted[ok] = True
            remaining = remaining[~better]
            step[remaining] *= 0.5
        stalled[rows[~accepted]] = True

        grad = grad_f - b @ sigma_inv
        gnorm = np.max(np.abs(grad), axis=1)
        polished = gnorm <= polish_tol

    converged = gnorm <= ctrl.inner_tol
    neg_hess = sigma_inv + (-curv)[:, :, None] * eye
    try:
        chol_all = np.linalg.cholesky(neg_hess)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol_all, axis1=1, axis2=2)), axis=1)
    except np.linalg.LinAlgError:
        logdet = np.full(n, np.nan)
        for i in range(n):
            try:
                ci = np.linalg.cholesky(neg_hess[i])
                logdet[i] = 2.0 * np.sum(np.log(np.diag(ci)))
            except np.linalg.LinAlgError:
                converged[i] = False
    return LaplaceState(
        b=b,
        neg_hess=neg_hess,
        converged=converged,
        joint=val,
        logdet=logdet,
        t_cmp=t_warm,
    )


def marginal_loglik(spec, params, data, warm=None, ctrl=LaplaceControl(),
                    cmp_ctrl=DEFAULT_CMP_CONTROL):
    """Laplace-approximated marginal log-likelihood and the solver state.

    Raises InnerSolveError when any subject mode is unconverged.
    """
    design = data if isinstance(data, ModelMatrices) else ModelMatrices(spec, data)
    state = inner_solve(spec, params, design, warm=warm, ctrl=ctrl, cmp_ctrl=cmp_ctrl)
    if not state.converged.all():
        bad = int(np.sum(~state.converged))
        raise InnerSolveError(f"{bad} subject modes failed to converge")
    value = float(np.sum(state.joint + 0.5 * design.k * LN_2PI - 0.5 * state.logdet))
    return value, state
