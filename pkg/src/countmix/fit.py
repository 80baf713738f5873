"""Outer maximum-likelihood estimation over the flat unconstrained vector.

The marginal log-likelihood is maximized by chaining quasi-Newton rounds
(``A`` = scipy L-BFGS-B, ``B`` = scipy BFGS), each warm-starting from the
previous round's estimates and Laplace state.  Outer derivatives are central
finite differences of the Laplace objective; every evaluation re-solves the
inner modes warm-started from the current base state.  Standard errors come
from the finite-difference observed information at the optimum with
delta-method transforms to the reporting scale.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .cov import CovSpec, build_sigma, corr_from_raw_jacobian, n_pairs
from .families import CmpSeriesControl, SeriesError
from .laplace import InnerSolveError, LaplaceControl, marginal_loglik
from .model import (
    ModelMatrices,
    ParameterVector,
    flat_names,
    flatten,
    make_params,
    n_params,
    unflatten,
)

_OPTIMIZERS = {"A": "L-BFGS-B", "B": "BFGS"}


@dataclass(frozen=True)
class FitControl:
    """Optimizer schedule and numerical knobs for one fit."""

    schedule: tuple = ("A", "B", "A", "A")
    outer_tol: float = 1e-6
    max_outer_iter: int = 500
    fd_step: float = 1e-5
    hess_step: float = 1e-4
    srs_size: int | None = None
    srs_seed: int = 2390
    threads: int = 1
    laplace: LaplaceControl = field(default_factory=LaplaceControl)
    cmp: CmpSeriesControl = field(default_factory=CmpSeriesControl)

    def __post_init__(self):
        if not self.schedule:
            raise ValueError("optimizer schedule must be nonempty")
        bad = [s for s in self.schedule if s not in _OPTIMIZERS]
        if bad:
            raise ValueError(f"unknown optimizers in schedule: {bad}")


@dataclass
class RoundTrace:
    round: int
    optimizer: str
    iterations: int
    loglik: float
    grad_norm: float
    message: str


@dataclass
class InfoResult:
    """Observed-information output: flat-scale vcov plus reporting-scale SEs."""

    vcov: np.ndarray
    se_flat: np.ndarray
    hessian: np.ndarray
    pd: bool


@dataclass
class FitResult:
    spec: object
    params: ParameterVector
    flat: np.ndarray
    flat_names: list
    loglik: float
    np_: int
    converged: bool
    trace: list
    vcov: np.ndarray | None
    se_flat: np.ndarray | None
    report_names: list
    report_kind: list
    report_values: np.ndarray
    report_se: np.ndarray
    report_fixed: list
    metadata: dict

    @property
    def missing_se(self):
        return np.isnan(self.report_se)

    def report_row(self, name):
        i = self.report_names.index(name)
        return self.report_values[i], self.report_se[i]


def initial_values(spec, data):
    """Per-response Poisson GLM by IRLS plus working-residual variance seeds."""
    design = data if isinstance(data, ModelMatrices) else ModelMatrices(spec, data)
    beta = []
    log_sd = np.empty(design.k)
    for j in range(design.k):
        X = design.X[j]
        y = design.Y[:, j]
        b, resid_var, ok = _poisson_irls(X, y)
        if not ok:
            b = np.zeros(X.shape[1])
            b[0] = math.log(y.mean() + 0.5)
            resid_var = 1.0
        beta.append(b)
        log_sd[j] = max(math.log(0.05), 0.5 * math.log(max(resid_var, 1e-300)))
    disp = np.ones(design.k) if spec.family.has_dispersion else None
    return ParameterVector(
        beta=beta, disp=disp, cov=CovSpec(log_sd, np.zeros(n_pairs(design.k)))
    )


def _poisson_irls(X, y, max_iter=50, tol=1e-10):
    """Log-link Poisson IRLS; returns (beta, working-residual variance, ok)."""
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.mean() + 0.5)
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -30.0, 30.0)
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        WX = X * mu[:, None]
        try:
            new = np.linalg.solve(X.T @ WX, WX.T @ z)
        except np.linalg.LinAlgError:
            return beta, 1.0, False
        if not np.all(np.isfinite(new)):
            return beta, 1.0, False
        done = np.max(np.abs(new - beta)) < tol
        beta = new
        if done:
            break
    eta = np.clip(X @ beta, -30.0, 30.0)
    mu = np.exp(eta)
    resid = (y - mu) / mu
    return beta, float(np.var(resid)), True


class MarginalObjective:
    """Negative Laplace marginal log-likelihood with warm-started evaluations."""

    def __init__(self, spec, design, ctrl):
        self.spec = spec
        self.design = design
        self.ctrl = ctrl
        self.state = None  # latest successful LaplaceState
        self.n_eval = 0
        self._memo_key = None
        self._memo_val = np.inf

    def value(self, theta, warm=None, update=True):
        theta = np.asarray(theta, dtype=np.float64)
        key = theta.tobytes()
        if update and key == self._memo_key:
            return self._memo_val
        self.n_eval += 1
        params = unflatten(theta, self.spec, self.design)
        try:
            with np.errstate(all="ignore"):
                v, st = marginal_loglik(
                    self.spec,
                    params,
                    self.design,
                    warm=warm if warm is not None else self.state,
                    ctrl=self.ctrl.laplace,
                    cmp_ctrl=self.ctrl.cmp,
                )
        except (InnerSolveError, SeriesError, np.linalg.LinAlgError):
            return np.inf
        if not np.isfinite(v):
            return np.inf
        if update:
            self.state = st
            self._memo_key = key
            self._memo_val = -v
        return -v

    def grad(self, theta):
        """Central FD gradient; every coordinate warm-starts from one base state."""
        theta = np.asarray(theta, dtype=np.float64)
        f0 = self.value(theta)
        base = self.state
        h = np.maximum(self.ctrl.fd_step, self.ctrl.fd_step * np.abs(theta))

        def one(i):
            tp = theta.copy()
            tp[i] += h[i]
            fp = self.value(tp, warm=base, update=False)
            tm = theta.copy()
            tm[i] -= h[i]
            fm = self.value(tm, warm=base, update=False)
            if np.isfinite(fp) and np.isfinite(fm):
                return (fp - fm) / (2.0 * h[i])
            if np.isfinite(fp):
                return (fp - f0) / h[i]
            if np.isfinite(fm):
                return (f0 - fm) / h[i]
            return 0.0

        idx = range(theta.size)
        if self.ctrl.threads > 1:
            with ThreadPoolExecutor(max_workers=self.ctrl.threads) as ex:
                g = list(ex.map(one, idx))
        else:
            g = [one(i) for i in idx]
        return np.asarray(g)


def fit(spec, data, ctrl=FitControl(), init=None):
    """Maximum-likelihood fit: SRS warm start (optional), optimizer chaining,
    convergence check, and observed-information standard errors."""
    design = ModelMatrices(spec, data)
    params0 = init if init is not None else initial_values(spec, design)
    theta = flatten(params0, spec)

    metadata = {
        "schedule": list(ctrl.schedule),
        "srs_size": ctrl.srs_size,
        "srs_seed": ctrl.srs_seed,
        "threads": ctrl.threads,
    }
    if ctrl.srs_size is not None and ctrl.srs_size < design.n:
        rng = np.random.default_rng(ctrl.srs_seed)
        idx = np.sort(rng.choice(design.n, size=ctrl.srs_size, replace=False))
        sub_design = ModelMatrices(spec, data.subset(idx))
        sub = _fit_flat(spec, sub_design, theta, ctrl, {}, with_se=False)
        theta = sub.flat.copy()

    return _fit_flat(spec, design, theta, ctrl, metadata)


def _fit_flat(spec, design, theta, ctrl, metadata, with_se=True):
    obj = MarginalObjective(spec, design, ctrl)
    trace = []
    for rnd, tag in enumerate(ctrl.schedule, start=1):
        method = _OPTIMIZERS[tag]
        options = {"maxiter": ctrl.max_outer_iter, "gtol": ctrl.outer_tol}
        if method == "L-BFGS-B":
            options["ftol"] = 1e-14
            options["maxfun"] = 10 * ctrl.max_outer_iter * max(theta.size, 1)
        res = minimize(
            obj.value, theta, jac=obj.grad, method=method, options=options
        )
        if np.all(np.isfinite(res.x)) and obj.value(res.x) <= obj.value(theta):
            theta = res.x
        g = obj.grad(theta)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        trace.append(
            RoundTrace(
                round=rnd,
                optimizer=method,
                iterations=int(res.nit),
                loglik=-obj.value(theta),
                grad_norm=gnorm,
                message=str(res.message),
            )
        )

    if with_se and np.isfinite(obj.value(theta)):
        info = observed_information_se(spec, design, theta, ctrl=ctrl, warm=obj.state)
        vcov, se_flat = info.vcov, info.se_flat
        # Line searches cannot resolve objective changes of order g^2/H once
        # they fall below float resolution of |f|, so the quasi-Newton rounds
        # stall with a measurable gradient.  Polish with Newton steps on the
        # FD gradient using the observed-information Hessian.
        theta, gnorm, polish_iters = _gradient_polish(
            obj, theta, trace[-1].grad_norm, info.hessian, ctrl
        )
        if polish_iters:
            trace.append(
                RoundTrace(
                    round=len(trace) + 1,
                    optimizer="newton-polish",
                    iterations=polish_iters,
                    loglik=-obj.value(theta),
                    grad_norm=gnorm,
                    message="gradient polish",
                )
            )
    else:
        vcov, se_flat = None, np.full(theta.size, np.nan)

    loglik = -obj.value(theta)
    converged = bool(np.isfinite(loglik)) and trace[-1].grad_norm <= ctrl.outer_tol
    params = unflatten(theta, spec, design)

    names, kinds, values, ses, fixed = _report_table(spec, design, params, theta, vcov, se_flat)
    metadata = dict(metadata)
    metadata["optimizer_map"] = _OPTIMIZERS
    return FitResult(
        spec=spec,
        params=params,
        flat=theta,
        flat_names=flat_names(spec, design),
        loglik=float(loglik),
        np_=n_params(spec, design),
        converged=converged,
        trace=trace,
        vcov=vcov,
        se_flat=se_flat,
        report_names=names,
        report_kind=kinds,
        report_values=values,
        report_se=ses,
        report_fixed=fixed,
        metadata=metadata,
    )


def _gradient_polish(obj, theta, gnorm, hessian, ctrl, max_steps=8):
    """Newton steps on the FD gradient; accepts only gradient-norm decreases."""
    steps = 0
    for _ in range(max_steps):
        if gnorm <= ctrl.outer_tol:
            break
        g = obj.grad(theta)
        try:
            delta = np.linalg.solve(hessian, -g)
        except np.linalg.LinAlgError:
            break
        improved = False
        for s in (1.0, 0.5, 0.25):
            cand = theta + s * delta
            if not np.isfinite(obj.value(cand, update=False)):
                continue
            gn = float(np.max(np.abs(obj.grad(cand))))
            if gn < gnorm:
                theta, gnorm = cand, gn
                improved = True
                break
        steps += 1
        if not improved:
            break
    obj.value(theta)  # refresh the cached state at the final point
    return theta, gnorm, steps


def observed_information_se(spec, data, at, ctrl=FitControl(), warm=None):
    """Central-difference Hessian of the negative marginal log-likelihood.

    Non-PD Hessians yield missing (NaN) SEs exactly for the coordinates
    carried by the non-positive eigenvectors; the PD projection is still
    inverted so the remaining coordinates keep reportable SEs.
    """
    design = data if isinstance(data, ModelMatrices) else ModelMatrices(spec, data)
    obj = MarginalObjective(spec, design, ctrl)
    theta = np.asarray(at, dtype=np.float64)
    f0 = obj.value(theta, warm=warm)
    base = obj.state if obj.state is not None else warm
    p = theta.size
    h = np.maximum(ctrl.hess_step, ctrl.hess_step * np.abs(theta))

    def ev(offsets):
        t = theta.copy()
        for i, d in offsets:
            t[i] += d
        return obj.value(t, warm=base, update=False)

    H = np.full((p, p), np.nan)
    for i in range(p):
        fp = ev([(i, h[i])])
        fm = ev([(i, -h[i])])
        if np.isfinite(fp) and np.isfinite(fm) and np.isfinite(f0):
            H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
        for j in range(i + 1, p):
            fpp = ev([(i, h[i]), (j, h[j])])
            fpm = ev([(i, h[i]), (j, -h[j])])
            fmp = ev([(i, -h[i]), (j, h[j])])
            fmm = ev([(i, -h[i]), (j, -h[j])])
            if all(np.isfinite(v) for v in (fpp, fpm, fmp, fmm)):
                H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])

    bad_eval = np.isnan(H).any(axis=1)
    H_use = np.where(np.isnan(H), 0.0, H)
    H_use = 0.5 * (H_use + H_use.T)

    eigval, eigvec = np.linalg.eigh(H_use)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(eigval))) if p else 1.0)
    pd = bool(np.all(eigval > tol)) and not bad_eval.any()
    if pd:
        vcov = eigvec @ np.diag(1.0 / eigval) @ eigvec.T
        se = np.sqrt(np.diag(vcov))
    else:
        inv = np.where(eigval > tol, 1.0 / np.where(eigval > tol, eigval, 1.0), 0.0)
        vcov = eigvec @ np.diag(inv) @ eigvec.T
        implicated = np.zeros(p, dtype=bool)
        for q in np.flatnonzero(eigval <= tol):
            v = np.abs(eigvec[:, q])
            implicated |= v > 1e-6 * v.max()
        implicated |= bad_eval
        diag = np.diag(vcov).copy()
        se = np.sqrt(np.maximum(diag, 0.0))
        se[implicated | (diag <= 0)] = np.nan
    return InfoResult(vcov=vcov, se_flat=se, hessian=H_use, pd=pd)


def _report_table(spec, design, params, flat, vcov, se_flat):
    """Reporting-scale rows: beta, dispersion, sigma, rho with delta-method SEs."""
    names = []
    kinds = []
    values = []
    ses = []
    fixed = []
    pos = 0
    for j, sub in enumerate(design.coef_names):
        for name in sub:
            names.append(name)
            kinds.append("beta")
            values.append(flat[pos])
            ses.append(se_flat[pos])
            fixed.append(False)
            pos += 1
    c = spec.constraints
    dn = spec.family.dispersion_name
    if spec.family.has_dispersion:
        if c.fixed_dispersion is None:
            for r in spec.responses:
                names.append(f"{dn}:{r}")
                kinds.append("dispersion")
                v = math.exp(flat[pos])
                values.append(v)
                ses.append(v * se_flat[pos])
                fixed.append(False)
                pos += 1
        else:
            for j, r in enumerate(spec.responses):
                names.append(f"{dn}:{r}")
                kinds.append("dispersion")
                values.append(params.disp[j])
                ses.append(np.nan)
                fixed.append(True)
    sd_positions = {}
    if c.fixed_variance is None:
        if c.shared_variance:
            names.append("sigma:(shared)")
            kinds.append("sigma")
            v = math.exp(flat[pos])
            values.append(v)
            ses.append(v * se_flat[pos])
            fixed.append(False)
            pos += 1
        else:
            for j, r in enumerate(spec.responses):
                names.append(f"sigma:{r}")
                kinds.append("sigma")
                v = math.exp(flat[pos])
                values.append(v)
                ses.append(v * se_flat[pos])
                fixed.append(False)
                sd_positions[j] = pos
                pos += 1
    else:
        for r in spec.responses:
            names.append(f"sigma:{r}")
            kinds.append("sigma")
            values.append(math.sqrt(c.fixed_variance))
            ses.append(np.nan)
            fixed.append(True)
    _, corr = build_sigma(params.cov)
    rows, cols = np.tril_indices(spec.k, -1)
    if not c.fix_rho_zero:
        m = n_pairs(spec.k)
        raw_se = se_flat[pos : pos + m]
        if vcov is not None and m:
            J = corr_from_raw_jacobian(params.cov)[spec.k :, spec.k :]
            vr = vcov[pos : pos + m, pos : pos + m]
            rho_var = np.diag(J @ vr @ J.T)
            rho_se = np.sqrt(np.maximum(rho_var, 0.0))
        else:
            rho_se = np.full(m, np.nan)
        raw_missing = np.isnan(raw_se)
        row_positions = {}
        for q, ri in enumerate(rows):
            row_positions.setdefault(ri, []).append(q)
        for pidx, (i, j) in enumerate(zip(rows, cols)):
            # a rho SE is reportable only when every raw entry it touches has one
            touched = row_positions.get(i, []) + row_positions.get(j, [])
            miss = any(raw_missing[q] for q in touched)
            names.append(f"rho:{spec.responses[i]}:{spec.responses[j]}")
            kinds.append("rho")
            values.append(corr[i, j])
            ses.append(np.nan if miss else rho_se[pidx])
            fixed.append(False)
        pos += m
    else:
        for i, j in zip(rows, cols):
            names.append(f"rho:{spec.responses[i]}:{spec.responses[j]}")
            kinds.append("rho")
            values.append(0.0)
            ses.append(np.nan)
            fixed.append(True)
    return names, kinds, np.asarray(values, dtype=np.float64), np.asarray(ses), fixed
