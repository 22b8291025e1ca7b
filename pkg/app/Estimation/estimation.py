import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numdifftools as nd
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import linalg, optimize

from app.config import get_settings
from app.errors import (
    CKSVARError,
    ConfigValidationError,
    ConvergenceError,
    InsufficientSampleError,
)
from app.Model.core_model import build_regressors
from app.Model.likelihood import LatentEstimate, LikelihoodConfig, loglik, loglik_cksvar
from app.Model.types import KINK, Dataset, ModelSpec, ReducedFormParams, RegressorBundle, Variant

logger = logging.getLogger(__name__)

PENALTY = 1e10


class FitOptions(BaseModel):
    n_starts: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    jitter: float = Field(default=0.1, ge=0.0)
    warmup_iter: int = Field(default=400, ge=0)
    maxiter: int = Field(default=500, ge=1)
    gtol: float = Field(default=1e-5, gt=0.0)
    n_particles: int = Field(default=4096, ge=2)
    antithetic: bool = True
    covariance: Literal["hessian", "bfgs", "none"] = "hessian"
    workers: Optional[int] = Field(default=None, ge=1)
    condition_on: Optional[int] = Field(default=None, ge=1)

    def likelihood_config(self) -> LikelihoodConfig:
        return LikelihoodConfig(n_particles=self.n_particles, seed=self.seed, antithetic=self.antithetic)


@dataclass(frozen=True)
class ParameterLayout:
    """Maps the free reduced-form cells of a spec onto an unconstrained vector.

    Order: free C cells (row-major), free C* cells, free kink entries, then the
    lower Cholesky factor of Omega with its diagonal in logs.
    """
    spec: ModelSpec
    equations: Tuple[str, ...]
    regressors: Tuple[str, ...]
    latent: Tuple[str, ...]
    y2_lag_columns: Tuple[int, ...]
    c_free: Tuple[Tuple[int, int], ...]
    cstar_free: Tuple[Tuple[int, int], ...]
    kink_free: Tuple[int, ...]

    @classmethod
    def build(cls, spec: ModelSpec, bundle: RegressorBundle, exog_names: Sequence[str] = ()) -> "ParameterLayout":
        equations = bundle.endog_names
        zero = set(spec.restrictions)
        problems = []
        known = set(bundle.labels) | set(bundle.latent_labels) | {KINK}
        for eq, label in spec.restrictions:
            if eq not in equations:
                problems.append(f"unknown equation {eq!r} in restriction")
            if label not in known:
                problems.append(f"unknown regressor {label!r} in restriction")
            if label == KINK and eq == equations[-1]:
                problems.append("the policy equation has no kink coefficient")
        for name, eqs in spec.exog_policy:
            if name not in exog_names:
                problems.append(f"exogenous control {name!r} is not in the dataset")
                continue
            for eq in eqs:
                if eq not in equations:
                    problems.append(f"unknown equation {eq!r} for control {name!r}")
            zero.update((eq, name) for eq in equations if eq not in eqs)
        if problems:
            raise ConfigValidationError(problems)

        c_free = tuple((i, j) for i, eq in enumerate(equations)
                       for j, label in enumerate(bundle.labels) if (eq, label) not in zero)
        if spec.variant == Variant.CKSVAR:
            cstar_free = tuple((i, j) for i, eq in enumerate(equations)
                               for j, label in enumerate(bundle.latent_labels) if (eq, label) not in zero)
        else:
            cstar_free = ()
        if spec.variant == Variant.CSVAR:
            kink_free = ()
        else:
            kink_free = tuple(i for i, eq in enumerate(equations[:-1]) if (eq, KINK) not in zero)
        return cls(spec=spec, equations=equations, regressors=bundle.labels, latent=bundle.latent_labels,
                   y2_lag_columns=bundle.y2_lag_columns, c_free=c_free, cstar_free=cstar_free,
                   kink_free=kink_free)

    @property
    def k(self) -> int:
        return len(self.equations)

    @property
    def n_chol(self) -> int:
        return self.k * (self.k + 1) // 2

    @property
    def npar(self) -> int:
        return len(self.c_free) + len(self.cstar_free) + len(self.kink_free) + self.n_chol

    @property
    def labels(self) -> Tuple[str, ...]:
        eqs = self.equations
        out = [f"C[{eqs[i]},{self.regressors[j]}]" for i, j in self.c_free]
        out += [f"C[{eqs[i]},{self.latent[j]}]" for i, j in self.cstar_free]
        out += [f"{KINK}[{eqs[i]}]" for i in self.kink_free]
        for i, j in zip(*np.tril_indices(self.k)):
            out.append(f"{'logchol' if i == j else 'chol'}[{eqs[i]},{eqs[j]}]")
        return tuple(out)

    def pack(self, rf: ReducedFormParams) -> np.ndarray:
        L = np.array(rf.omega_chol)
        signs = np.sign(np.diag(L))
        L = L * signs[None, :]
        chol = []
        for i, j in zip(*np.tril_indices(self.k)):
            chol.append(math.log(L[i, j]) if i == j else L[i, j])
        return np.concatenate([
            [rf.C[i, j] for i, j in self.c_free],
            [rf.Cstar[i, j] for i, j in self.cstar_free],
            [rf.betatilde[i] for i in self.kink_free],
            chol,
        ]).astype(float)

    def unpack(self, theta: np.ndarray) -> ReducedFormParams:
        k, p = self.k, len(self.latent)
        theta = np.asarray(theta, dtype=float)
        pos = 0
        C = np.zeros((k, len(self.regressors)))
        for (i, j), value in zip(self.c_free, theta[pos:pos + len(self.c_free)]):
            C[i, j] = value
        pos += len(self.c_free)
        Cstar = np.zeros((k, p))
        for (i, j), value in zip(self.cstar_free, theta[pos:pos + len(self.cstar_free)]):
            Cstar[i, j] = value
        pos += len(self.cstar_free)
        if self.spec.variant == Variant.CSVAR:
            Cstar = C[:, list(self.y2_lag_columns)].copy()
        betatilde = np.zeros(k - 1)
        for i, value in zip(self.kink_free, theta[pos:pos + len(self.kink_free)]):
            betatilde[i] = value
        pos += len(self.kink_free)
        L = np.zeros((k, k))
        rows, cols = np.tril_indices(k)
        L[rows, cols] = theta[pos:pos + self.n_chol]
        L[np.diag_indices(k)] = np.exp(np.diag(L))
        return ReducedFormParams(C=C, Cstar=Cstar, betatilde=betatilde, omega_chol=L,
                                 labels=self.regressors, y2_lag_columns=self.y2_lag_columns)


@dataclass
class StartDiagnostics:
    index: int
    loglik: float
    status: int
    message: str
    nfev: int
    converged: bool
    theta: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {"index": self.index, "loglik": self.loglik, "status": self.status,
                "message": self.message, "nfev": self.nfev, "converged": self.converged}


@dataclass
class EstimationResult:
    spec: ModelSpec
    params: ReducedFormParams
    loglik: float
    npar: int
    t_eff: int
    aic_per_obs: float
    covariance: Optional[np.ndarray]
    theta: np.ndarray
    param_labels: Tuple[str, ...]
    standard_errors: Optional[np.ndarray]
    diagnostics: List[StartDiagnostics]
    latent: Optional[LatentEstimate]
    data_fingerprint: str
    condition_on: int
    covariance_note: str = ""
    best_start: Optional[int] = None

    @property
    def converged(self) -> bool:
        if self.best_start is None:
            return any(d.converged for d in self.diagnostics)
        return self.diagnostics[self.best_start].converged

    def parameter_table(self) -> pd.DataFrame:
        se = self.standard_errors if self.standard_errors is not None else np.full(self.npar, np.nan)
        return pd.DataFrame({"parameter": list(self.param_labels), "estimate": self.theta, "std_error": se})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "npar": self.npar,
            "t_eff": self.t_eff,
            "aic_per_obs": self.aic_per_obs,
            "condition_on": self.condition_on,
            "converged": self.converged,
            "theta": dict(zip(self.param_labels, self.theta.tolist())),
            "standard_errors": None if self.standard_errors is None
            else dict(zip(self.param_labels, self.standard_errors.tolist())),
            "covariance_note": self.covariance_note,
            "diagnostics": [d.to_dict() for d in self.diagnostics],
            "data_fingerprint": self.data_fingerprint,
        }


def warm_start(spec: ModelSpec, data: Dataset, condition_on: Optional[int] = None,
               layout: Optional[ParameterLayout] = None) -> ReducedFormParams:
    """Equation-by-equation least squares on the periods off the bound, latent terms at zero."""
    bundle = build_regressors(data, spec, condition_on=condition_on)
    layout = layout or ParameterLayout.build(spec, bundle, data.exog_names)
    rows = ~bundle.D.astype(bool)
    if rows.sum() <= bundle.X.shape[1]:
        rows = np.ones(bundle.t_eff, dtype=bool)
    X, Y = bundle.X[rows], bundle.y[rows]
    C = np.zeros((bundle.k, X.shape[1]))
    for i in range(bundle.k):
        cols = [j for (r, j) in layout.c_free if r == i]
        if cols:
            C[i, cols] = linalg.lstsq(X[:, cols], Y[:, i])[0]
    resid = Y - X @ C.T
    omega = resid.T @ resid / max(rows.sum() - X.shape[1], 1)
    omega = 0.5 * (omega + omega.T) + 1e-10 * np.eye(bundle.k)
    Cstar = np.zeros((bundle.k, bundle.p))
    if spec.variant == Variant.CSVAR:
        Cstar = C[:, list(bundle.y2_lag_columns)].copy()
    return ReducedFormParams.from_omega(C=C, Cstar=Cstar, betatilde=np.zeros(bundle.k - 1), Omega=omega,
                                        labels=bundle.labels, y2_lag_columns=bundle.y2_lag_columns)


class _Objective:
    """Negative log-likelihood in packed coordinates with a fixed likelihood seed."""

    def __init__(self, layout: ParameterLayout, data: Dataset, spec: ModelSpec, cfg: LikelihoodConfig,
                 condition_on: int):
        self.layout = layout
        self.data = data
        self.spec = spec
        self.cfg = cfg
        self.condition_on = condition_on

    def loglik(self, theta: np.ndarray) -> float:
        try:
            value = loglik(self.layout.unpack(theta), self.data, self.spec, self.cfg,
                           condition_on=self.condition_on)
        except (CKSVARError, linalg.LinAlgError, FloatingPointError, ValueError):
            return -math.inf
        return value if np.isfinite(value) else -math.inf

    def __call__(self, theta: np.ndarray) -> float:
        value = self.loglik(theta)
        return -value if np.isfinite(value) else PENALTY


def _run_start(index: int, theta0: np.ndarray, objective: _Objective, options: FitOptions):
    nfev = 0
    theta = theta0
    if options.warmup_iter:
        warm = optimize.minimize(objective, theta, method="Nelder-Mead",
                                 options={"maxiter": options.warmup_iter, "xatol": 1e-6, "fatol": 1e-8})
        theta, nfev = warm.x, warm.nfev
    polish = optimize.minimize(objective, theta, method="BFGS",
                               options={"maxiter": options.maxiter, "gtol": options.gtol})
    nfev += polish.nfev
    value = -polish.fun if polish.fun < PENALTY else -math.inf
    converged = bool(np.isfinite(value) and polish.status in (0, 2))
    logger.info("start %d: loglik=%.4f status=%d converged=%s", index, value, polish.status, converged)
    diag = StartDiagnostics(index=index, loglik=value, status=int(polish.status), message=str(polish.message),
                            nfev=int(nfev), converged=converged, theta=np.asarray(polish.x))
    return diag, getattr(polish, "hess_inv", None)


def _starting_points(theta0: np.ndarray, options: FitOptions) -> List[np.ndarray]:
    starts = [theta0]
    for child in np.random.SeedSequence(options.seed).spawn(options.n_starts - 1):
        rng = np.random.default_rng(child)
        starts.append(theta0 + options.jitter * np.maximum(np.abs(theta0), 1.0) * rng.standard_normal(theta0.size))
    return starts


def _covariance(objective: _Objective, theta: np.ndarray, method: str, hess_inv) -> Tuple[Optional[np.ndarray], str]:
    if method == "none":
        return None, "not requested"
    if method == "bfgs":
        if hess_inv is None:
            return None, "BFGS inverse Hessian unavailable"
        cov = np.asarray(hess_inv, dtype=float)
        return 0.5 * (cov + cov.T), "BFGS inverse Hessian"
    try:
        hess = nd.Hessian(objective, step=1e-4)(theta)
        cov = linalg.inv(0.5 * (hess + hess.T))
    except (linalg.LinAlgError, ValueError) as exc:
        logger.warning("Hessian not invertible: %s", exc)
        return None, "Hessian not invertible"
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0):
        logger.warning("numerical Hessian is not positive definite at the optimum")
        return None, "Hessian not positive definite"
    return cov, "inverse numerical Hessian"


def fit(spec: ModelSpec, data: Dataset, options: Optional[FitOptions] = None) -> EstimationResult:
    """Multi-start maximum likelihood; deterministic given ``options.seed``."""
    options = options or FitOptions()
    data.validate()
    condition_on = options.condition_on or spec.p
    bundle = build_regressors(data, spec, condition_on=condition_on)
    layout = ParameterLayout.build(spec, bundle, data.exog_names)
    if bundle.t_eff <= layout.npar:
        raise InsufficientSampleError(f"{bundle.t_eff} observations for {layout.npar} parameters")
    cfg = options.likelihood_config()
    objective = _Objective(layout, data, spec, cfg, condition_on)
    theta0 = layout.pack(warm_start(spec, data, condition_on, layout))
    starts = _starting_points(theta0, options)
    workers = options.workers or get_settings().workers
    logger.info("fitting %s on %d observations with %d parameters and %d starts",
                spec.label(), bundle.t_eff, layout.npar, len(starts))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_start, i, th, objective, options) for i, th in enumerate(starts)]
        outcomes = [f.result() for f in futures]
    diagnostics = [d for d, _ in outcomes]
    ranked = sorted((d for d in diagnostics if d.converged), key=lambda d: (-d.loglik, d.index))
    if not ranked:
        # best finite start stands in; the result reports converged=False
        ranked = sorted((d for d in diagnostics if np.isfinite(d.loglik)), key=lambda d: (-d.loglik, d.index))
        if not ranked:
            raise ConvergenceError(f"no start of {spec.label()} reached a finite log-likelihood")
        logger.warning("none of %d starts converged for %s; reporting the best finite one", len(starts), spec.label())
    best = ranked[0]
    hess_inv = outcomes[best.index][1]
    params = layout.unpack(best.theta)
    covariance, note = _covariance(objective, best.theta, options.covariance, hess_inv)
    se = None if covariance is None else np.sqrt(np.diag(covariance))
    latent = None
    try:
        latent = loglik_cksvar(params, data, spec, cfg, smooth=True, condition_on=condition_on)[1]
    except CKSVARError as exc:
        logger.warning("latent smoothing failed at the optimum: %s", exc)
    result = EstimationResult(
        spec=spec, params=params, loglik=best.loglik, npar=layout.npar, t_eff=bundle.t_eff,
        aic_per_obs=(2.0 * layout.npar - 2.0 * best.loglik) / bundle.t_eff,
        covariance=covariance, theta=best.theta, param_labels=layout.labels, standard_errors=se,
        diagnostics=diagnostics, latent=latent, data_fingerprint=data.fingerprint(),
        condition_on=condition_on, covariance_note=note, best_start=best.index,
    )
    logger.info("%s: loglik=%.4f npar=%d aic/T=%.4f", spec.label(), result.loglik, result.npar, result.aic_per_obs)
    return result


def evaluate(spec: ModelSpec, data: Dataset, rf: ReducedFormParams,
             options: Optional[FitOptions] = None) -> float:
    """Log-likelihood of given reduced-form parameters under the fit's sample conventions."""
    options = options or FitOptions()
    return loglik(rf, data, spec, options.likelihood_config(), condition_on=options.condition_on or spec.p)
