"""Model specification, design matrices, and the flat-parameter bijection.

The linear predictor is eta_ir = x_ir' beta_r + b_ir with a log link for
every response; all responses share one family but may use different
covariate columns.  Constraint masks (no correlation, fixed or shared
variance, fixed dispersion) remove coordinates from the flat unconstrained
vector, and unflatten re-injects the fixed values.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .cov import CovSpec, build_sigma, n_pairs
from .families import DEFAULT_CMP_CONTROL, Family, eval_eta

INTERCEPT = "(intercept)"

# Paper-style defaults used when a dispersion is fixed without a value.
FIXED_DISP_DEFAULTS = {Family.NEGBIN2: 1.0, Family.CMP_MU: 1.5}


@dataclass(frozen=True)
class ConstraintSet:
    """Simplified-model switches: each one masks flat coordinates."""

    fix_rho_zero: bool = False
    fixed_dispersion: float | None = None
    fixed_variance: float | None = None
    shared_variance: bool = False

    def __post_init__(self):
        if self.fixed_variance is not None and self.shared_variance:
            raise ValueError("fixed_variance and shared_variance are exclusive")
        if self.fixed_variance is not None and self.fixed_variance <= 0:
            raise ValueError("fixed_variance must be positive")
        if self.fixed_dispersion is not None and self.fixed_dispersion <= 0:
            raise ValueError("fixed_dispersion must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description: responses, covariates, family, constraints."""

    family: Family
    responses: tuple
    covariates: tuple  # tuple of per-response column-name tuples
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    standardize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(
            self, "covariates", tuple(tuple(c) for c in self.covariates)
        )
        if len(self.covariates) != len(self.responses):
            raise ValueError("one covariate list per response required")
        if self.constraints.fixed_dispersion is not None and not self.family.has_dispersion:
            raise ValueError("fixed_dispersion is meaningless for Poisson")

    @property
    def k(self):
        return len(self.responses)

    def to_json(self):
        c = self.constraints
        return json.dumps(
            {
                "family": self.family.value,
                "responses": list(self.responses),
                "covariates": {r: list(cv) for r, cv in zip(self.responses, self.covariates)},
                "constraints": {
                    "fix_rho_zero": c.fix_rho_zero,
                    "fixed_dispersion": c.fixed_dispersion,
                    "fixed_variance": c.fixed_variance,
                    "shared_variance": c.shared_variance,
                },
                "standardize": self.standardize,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        family = Family.from_string(doc["family"])
        responses = tuple(doc["responses"])
        cov_doc = doc.get("covariates", {})
        if isinstance(cov_doc, list):
            covariates = tuple(tuple(cov_doc) for _ in responses)
        else:
            covariates = tuple(tuple(cov_doc.get(r, ())) for r in responses)
        cdoc = doc.get("constraints", {})
        fixed_disp = cdoc.get("fixed_dispersion")
        if fixed_disp == "default":
            fixed_disp = FIXED_DISP_DEFAULTS[family]
        constraints = ConstraintSet(
            fix_rho_zero=bool(cdoc.get("fix_rho_zero", False)),
            fixed_dispersion=fixed_disp,
            fixed_variance=cdoc.get("fixed_variance"),
            shared_variance=bool(cdoc.get("shared_variance", False)),
        )
        return cls(
            family=family,
            responses=responses,
            covariates=covariates,
            constraints=constraints,
            standardize=bool(doc.get("standardize", False)),
        )


@dataclass(frozen=True)
class Dataset:
    """Validated n x k response matrix plus covariate columns by name."""

    Y: np.ndarray
    response_names: tuple
    X: dict

    def __post_init__(self):
        object.__setattr__(self, "Y", np.asarray(self.Y, dtype=np.int64))
        object.__setattr__(self, "response_names", tuple(self.response_names))
        if self.Y.ndim != 2 or self.Y.shape[1] != len(self.response_names):
            raise ValueError("Y must be n x k with one column per response name")
        if np.any(self.Y < 0):
            raise ValueError("responses must be nonnegative integers")

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def k(self):
        return self.Y.shape[1]

    def subset(self, idx):
        return Dataset(
            Y=self.Y[idx],
            response_names=self.response_names,
            X={name: col[idx] for name, col in self.X.items()},
        )


@dataclass
class ParameterVector:
    """Structured parameter blocks; disp is on the natural scale."""

    beta: list
    disp: np.ndarray | None
    cov: CovSpec

    def copy(self):
        return ParameterVector(
            beta=[np.array(b) for b in self.beta],
            disp=None if self.disp is None else np.array(self.disp),
            cov=CovSpec(np.array(self.cov.log_sd), np.array(self.cov.corr_raw)),
        )


class ModelMatrices:
    """Per-response design matrices aligned with a ModelSpec."""

    def __init__(self, spec, data):
        missing = [r for r in spec.responses if r not in data.response_names]
        if missing:
            raise ValueError(f"responses not in dataset: {missing}")
        self.spec = spec
        col_of = {name: j for j, name in enumerate(data.response_names)}
        self.Y = np.ascontiguousarray(
            data.Y[:, [col_of[r] for r in spec.responses]], dtype=np.float64
        )
        self.n = data.n
        self.k = spec.k
        self.X = []
        self.coef_names = []
        for r, cols in zip(spec.responses, spec.covariates):
            mats = [np.ones(data.n)]
            names = [f"{r}:{INTERCEPT}"]
            for c in cols:
                if c not in data.X:
                    raise ValueError(f"covariate column {c!r} not in dataset")
                col = np.asarray(data.X[c], dtype=np.float64)
                if spec.standardize:
                    sd = col.std()
                    col = (col - col.mean()) / (sd if sd > 0 else 1.0)
                mats.append(col)
                names.append(f"{r}:{c}")
            self.X.append(np.column_stack(mats))
            self.coef_names.append(names)
        self.p = [x.shape[1] for x in self.X]

    def offsets(self, params):
        """n x k matrix of x_ir' beta_r."""
        out = np.empty((self.n, self.k))
        for j in range(self.k):
            out[:, j] = self.X[j] @ params.beta[j]
        return out


def _variance_len(spec):
    c = spec.constraints
    if c.fixed_variance is not None:
        return 0
    return 1 if c.shared_variance else spec.k


def _disp_len(spec):
    if not spec.family.has_dispersion or spec.constraints.fixed_dispersion is not None:
        return 0
    return spec.k


def _corr_len(spec):
    return 0 if spec.constraints.fix_rho_zero else n_pairs(spec.k)


def n_params(spec, design):
    """Length of the masked flat vector (the np of fit statistics)."""
    return sum(design.p) + _disp_len(spec) + _variance_len(spec) + _corr_len(spec)


def flatten(params, spec):
    """Masked flat unconstrained vector from structured parameters."""
    parts = [np.asarray(b, dtype=np.float64) for b in params.beta]
    if _disp_len(spec):
        parts.append(np.log(params.disp))
    c = spec.constraints
    if c.fixed_variance is None:
        if c.shared_variance:
            parts.append(params.cov.log_sd[:1])
        else:
            parts.append(params.cov.log_sd)
    if not c.fix_rho_zero:
        parts.append(params.cov.corr_raw)
    return np.concatenate(parts) if parts else np.empty(0)


def unflatten(flat, spec, design):
    """Rebuild structured parameters, injecting constraint-fixed values."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != n_params(spec, design):
        raise ValueError(
            f"flat vector has length {flat.size}, expected {n_params(spec, design)}"
        )
    pos = 0
    beta = []
    for p in design.p:
        beta.append(flat[pos : pos + p].copy())
        pos += p
    c = spec.constraints
    if spec.family.has_dispersion:
        if c.fixed_dispersion is not None:
            disp = np.full(spec.k, c.fixed_dispersion)
        else:
            disp = np.exp(flat[pos : pos + spec.k])
            pos += spec.k
    else:
        disp = None
    if c.fixed_variance is not None:
        log_sd = np.full(spec.k, 0.5 * np.log(c.fixed_variance))
    elif c.shared_variance:
        log_sd = np.full(spec.k, flat[pos])
        pos += 1
    else:
        log_sd = flat[pos : pos + spec.k].copy()
        pos += spec.k
    if c.fix_rho_zero:
        corr_raw = np.zeros(n_pairs(spec.k))
    else:
        corr_raw = flat[pos : pos + n_pairs(spec.k)].copy()
        pos += n_pairs(spec.k)
    return ParameterVector(beta=beta, disp=disp, cov=CovSpec(log_sd, corr_raw))


def flat_names(spec, design):
    """Names of the masked flat coordinates, in vector order."""
    names = [n for sub in design.coef_names for n in sub]
    c = spec.constraints
    if _disp_len(spec):
        dn = spec.family.dispersion_name
        names += [f"log_{dn}:{r}" for r in spec.responses]
    if c.fixed_variance is None:
        if c.shared_variance:
            names += ["log_sd:(shared)"]
        else:
            names += [f"log_sd:{r}" for r in spec.responses]
    if not c.fix_rho_zero:
        rows, cols = np.tril_indices(spec.k, -1)
        names += [
            f"corr_raw:{spec.responses[i]}:{spec.responses[j]}"
            for i, j in zip(rows, cols)
        ]
    return names


def cond_loglik(spec, params, data, b, ctrl=DEFAULT_CMP_CONTROL, t_warm=None):
    """Conditional joint log-likelihood given random effects.

    Returns (value, grad, curv, t_cache): grad and curv hold the first and
    second derivatives of sum_r log f(y_ir | mu_ir) in each b_ir (the
    cross-response second derivatives are identically zero).
    """
    design = data if isinstance(data, ModelMatrices) else ModelMatrices(spec, data)
    eta = design.offsets(params) + np.asarray(b, dtype=np.float64)
    value = 0.0
    grad = np.empty_like(eta)
    curv = np.empty_like(eta)
    t_cache = np.full(eta.shape, np.nan) if spec.family is Family.CMP_MU else None
    for j in range(design.k):
        disp = None if params.disp is None else params.disp[j]
        warm_j = None if t_warm is None else t_warm[:, j]
        lp, d1, d2, t = eval_eta(
            spec.family, design.Y[:, j], eta[:, j], disp=disp, t_warm=warm_j, ctrl=ctrl
        )
        value += lp.sum()
        grad[:, j] = d1
        curv[:, j] = d2
        if t is not None:
            t_cache[:, j] = t
    return value, grad, curv, t_cache


def make_params(spec, design, beta=None, disp=None, sigma2=None, rho_raw=None):
    """Convenience constructor with sensible shapes for tests and defaults."""
    if beta is None:
        beta = [np.zeros(p) for p in design.p]
    if disp is None and spec.family.has_dispersion:
        disp = np.ones(spec.k)
    if sigma2 is None:
        log_sd = np.zeros(spec.k)
    else:
        log_sd = 0.5 * np.log(np.asarray(sigma2, dtype=np.float64))
    if rho_raw is None:
        rho_raw = np.zeros(n_pairs(spec.k))
    return ParameterVector(
        beta=[np.asarray(b, dtype=np.float64) for b in beta],
        disp=None if disp is None else np.asarray(disp, dtype=np.float64),
        cov=CovSpec(log_sd, np.asarray(rho_raw, dtype=np.float64)),
    )


def sigma_of(params):
    sigma, _ = build_sigma(params.cov)
    return sigma
