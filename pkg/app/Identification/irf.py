import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import linalg

from app.config import get_settings
from app.errors import CKSVARError, EmptyIdentifiedSetError
from app.Identification.identification import IdentifiedPoint, IdentifiedSet, solve_point
from app.Model.core_model import build_regressors, simulate_reduced_form, structural_matrix
from app.Model.likelihood import LatentEstimate
from app.Model.types import Dataset, ModelSpec, ReducedFormParams

logger = logging.getLogger(__name__)

BANDS_NOTE = ("analytic 67% error bands are not computed; "
              "bootstrap_girf_bands gives parametric bootstrap bands instead")


class IRFRequest(BaseModel):
    shock: float = -0.25
    horizon: int = Field(default=12, ge=0)
    date: Optional[str] = None
    draws: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    cumulative: bool = False
    antithetic: bool = True


@dataclass
class IRFResult:
    """Responses in the dataset's column order, one row per horizon."""
    variables: Tuple[str, ...]
    horizons: np.ndarray
    response: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    mc_se: Optional[np.ndarray] = None
    date: Optional[str] = None
    regime: Optional[int] = None
    draws: int = 0
    points: int = 1
    notes: List[str] = field(default_factory=list)

    def response_of(self, name: str) -> np.ndarray:
        j = self.variables.index(name)
        if self.response is not None:
            return self.response[:, j]
        return 0.5 * (self.lower[:, j] + self.upper[:, j])

    def bands(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.lower is not None:
            return self.lower, self.upper
        return self.response, self.response

    def to_frame(self) -> pd.DataFrame:
        lo, hi = self.bands()
        rows = []
        for h in range(len(self.horizons)):
            for j, name in enumerate(self.variables):
                rows.append({"date": self.date, "horizon": int(self.horizons[h]), "variable": name,
                             "lo": float(lo[h, j]), "hi": float(hi[h, j])})
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variables": list(self.variables),
            "date": self.date,
            "regime": self.regime,
            "draws": self.draws,
            "points": self.points,
            "notes": list(self.notes),
            "response": None if self.response is None else self.response.tolist(),
            "lower": None if self.lower is None else self.lower.tolist(),
            "upper": None if self.upper is None else self.upper.tolist(),
            "mc_se": None if self.mc_se is None else self.mc_se.tolist(),
        }


def _at(series: np.ndarray, index: int) -> np.ndarray:
    return series[min(index, len(series) - 1)]


def _base_state(est, data: Dataset, latent: Optional[LatentEstimate], date: Optional[str]):
    spec: ModelSpec = est.spec
    bundle = build_regressors(data, spec, condition_on=est.condition_on)
    date = date or bundle.dates[-1]
    if date not in data.dates:
        raise ValueError(f"date {date} is not in the sample")
    t = data.dates.index(date)
    if t < spec.p:
        raise ValueError(f"date {date} has no complete lags")
    order = data.internal_order(spec.constrained_index)
    Y = data.values[:, order]
    lags = np.stack([Y[t - j] for j in range(1, spec.p + 1)])
    slots = np.zeros(spec.p)
    if latent is not None:
        for j in range(1, spec.p + 1):
            lag_date = data.dates[t - j]
            if lag_date in latent.dates:
                slots[j - 1] = latent.smoothed_slot[latent.dates.index(lag_date)]
    regime = int(Y[t, -1] <= data.bound[t] + get_settings().bound_tol)
    return t, order, lags, slots, regime, date


def _propagate(rf: ReducedFormParams, spec: ModelSpec, data: Dataset, t: int, lags: np.ndarray,
               slots: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Piecewise recursion for a stack of paths; u has shape (paths, H+1, k)."""
    n_paths, steps, k = u.shape
    p = spec.p
    Ylags = np.repeat(lags[None], n_paths, axis=0)
    gaps = np.repeat(slots[None], n_paths, axis=0)
    out = np.zeros((n_paths, steps, k))
    for h in range(steps):
        parts = [np.ones((n_paths, 1))] if spec.include_intercept else []
        parts.append(Ylags.reshape(n_paths, p * k))
        parts.append(np.repeat(_at(data.exog, t + h)[None], n_paths, axis=0))
        x = np.hstack(parts)
        ybar = x @ rf.C.T + gaps @ rf.Cstar.T + u[:, h]
        b = float(_at(data.bound, t + h))
        gap = ybar[:, -1] - b
        below = gap < 0.0
        y = ybar.copy()
        y[below, :-1] -= gap[below, None] * rf.betatilde[None, :]
        y[below, -1] = b
        out[:, h] = y
        Ylags = np.concatenate([y[:, None], Ylags[:, :-1]], axis=1)
        gaps = np.concatenate([np.minimum(gap, 0.0)[:, None], gaps[:, :-1]], axis=1)
    return out


def _normal_draws(rng: np.random.Generator, draws: int, steps: int, k: int, antithetic: bool) -> np.ndarray:
    if not antithetic:
        return rng.standard_normal((draws, steps, k))
    half = (draws + 1) // 2
    z = rng.standard_normal((half, steps, k))
    return np.concatenate([z, -z])[:draws]


def _mc_se(diff: np.ndarray, antithetic: bool) -> np.ndarray:
    R = diff.shape[0]
    if antithetic and R % 2 == 0 and R >= 4:
        pairs = 0.5 * (diff[: R // 2] + diff[R // 2:])
        return pairs.std(axis=0, ddof=1) / np.sqrt(R // 2)
    if R < 2:
        return np.zeros(diff.shape[1:])
    return diff.std(axis=0, ddof=1) / np.sqrt(R)


def girf(point: IdentifiedPoint, est, data: Dataset, latent: Optional[LatentEstimate],
         req: Optional[IRFRequest] = None) -> IRFResult:
    """Mean difference between paths with the policy disturbance set to the shock and set to zero.

    Other impact disturbances are drawn from N(0, (A Omega A')_11) and mapped
    through A^-1; later errors are N(0, Omega). Both branches share the draws.
    """
    req = req or IRFRequest()
    rf: ReducedFormParams = est.params
    spec: ModelSpec = est.spec
    t, order, lags, slots, regime, date = _base_state(est, data, latent, req.date)
    k, steps = rf.k, req.horizon + 1
    A = structural_matrix(point.beta, point.gamma)
    A_inv = linalg.inv(A)
    S = A @ rf.Omega @ A.T
    S11_chol = linalg.cholesky(0.5 * (S[:-1, :-1] + S[:-1, :-1].T), lower=True)

    rng = np.random.default_rng(req.seed)
    z = _normal_draws(rng, req.draws, steps, k, req.antithetic)
    u = z @ rf.omega_chol.T
    v1 = z[:, 0, :-1] @ S11_chol.T
    base_u, shock_u = u.copy(), u.copy()
    base_u[:, 0] = np.column_stack([v1, np.zeros(req.draws)]) @ A_inv.T
    shock_u[:, 0] = np.column_stack([v1, np.full(req.draws, req.shock)]) @ A_inv.T

    paths = _propagate(rf, spec, data, t, lags, slots, np.concatenate([shock_u, base_u]))
    diff = paths[: req.draws] - paths[req.draws:]
    inverse = np.argsort(order)
    response = diff.mean(axis=0)[:, inverse]
    mc_se = _mc_se(diff, req.antithetic)[:, inverse]
    if req.cumulative:
        response = np.cumsum(response, axis=0)
    return IRFResult(
        variables=data.endog_names, horizons=np.arange(steps), response=response, mc_se=mc_se,
        date=date, regime=regime, draws=req.draws, notes=[BANDS_NOTE],
    )


def linear_irf(rf: ReducedFormParams, point: IdentifiedPoint, spec: ModelSpec, horizon: int,
               shock: float) -> np.ndarray:
    """Responses of the never-binding linear VAR in (Y1..., Y2) order, from the lag polynomial."""
    k, p = rf.k, spec.p
    offset = 1 if spec.include_intercept else 0
    phis = [rf.C[:, offset + (j - 1) * k: offset + j * k] for j in range(1, p + 1)]
    impact = linalg.solve(structural_matrix(point.beta, point.gamma), np.r_[np.zeros(k - 1), shock])
    out = np.zeros((horizon + 1, k))
    out[0] = impact
    for h in range(1, horizon + 1):
        out[h] = sum(phis[j - 1] @ out[h - j] for j in range(1, min(p, h) + 1))
    return out


def _point_responses(identified: IdentifiedSet, est, data: Dataset, latent: Optional[LatentEstimate],
                     req: IRFRequest, workers: Optional[int] = None) -> Tuple[np.ndarray, List[IRFResult]]:
    accepted = identified.accepted()
    if not accepted:
        raise EmptyIdentifiedSetError("identified set has no accepted points")
    with ThreadPoolExecutor(max_workers=workers or get_settings().workers) as pool:
        results = list(pool.map(lambda pt: girf(pt, est, data, latent, req), accepted))
    return np.stack([r.response for r in results]), results


def girf_envelope(identified: IdentifiedSet, est, data: Dataset, latent: Optional[LatentEstimate],
                  req: Optional[IRFRequest] = None, workers: Optional[int] = None) -> IRFResult:
    req = req or IRFRequest()
    stack, results = _point_responses(identified, est, data, latent, req, workers)
    first = results[0]
    return IRFResult(
        variables=first.variables, horizons=first.horizons, lower=stack.min(axis=0), upper=stack.max(axis=0),
        mc_se=np.max(np.stack([r.mc_se for r in results]), axis=0), date=first.date, regime=first.regime,
        draws=req.draws, points=len(results), notes=list(first.notes),
    )


def default_flow_variables(data: Dataset) -> Tuple[str, ...]:
    roles = data.roles
    flows = tuple(roles[r] for r in ("inflation", "output_gap") if r in roles)
    if flows:
        return flows
    rates = {roles.get("long_rate"), data.policy_name}
    return tuple(name for name in data.endog_names if name not in rates)


def irf_timeline(identified: IdentifiedSet, est, data: Dataset, latent: Optional[LatentEstimate],
                 horizons: Sequence[int] = (0, 4, 8), req: Optional[IRFRequest] = None,
                 flow_variables: Optional[Sequence[str]] = None, dates: Optional[Sequence[str]] = None,
                 workers: Optional[int] = None) -> pd.DataFrame:
    """Per-date envelope of responses: flow variables cumulated over horizons, rates in levels."""
    req = (req or IRFRequest()).model_copy(update={"horizon": max(horizons), "cumulative": False})
    flows = set(flow_variables or default_flow_variables(data))
    dates = list(dates or (latent.dates if latent is not None else data.dates[est.spec.p:]))
    rows = []
    for date in dates:
        stack, _ = _point_responses(identified, est, data, latent, req.model_copy(update={"date": date}), workers)
        for j, name in enumerate(data.endog_names):
            series = np.cumsum(stack[:, :, j], axis=1) if name in flows else stack[:, :, j]
            for h in horizons:
                rows.append({"date": date, "horizon": int(h), "variable": name,
                             "lo": float(series[:, h].min()), "hi": float(series[:, h].max()),
                             "cumulative": name in flows})
    return pd.DataFrame(rows)


def bootstrap_girf_bands(point: IdentifiedPoint, est, data: Dataset, req: Optional[IRFRequest] = None,
                         n_boot: int = 100, options=None, level: float = 0.67) -> IRFResult:
    """Parametric bootstrap: resimulate from the fit, refit, re-solve at the same xi, recompute the GIRF."""
    from app.Estimation.estimation import fit

    req = req or IRFRequest()
    rf, spec = est.params, est.spec
    center = girf(point, est, data, est.latent, req)
    order = data.internal_order(spec.constrained_index)
    init = data.values[: spec.p][:, order]
    seeds = np.random.SeedSequence(req.seed).spawn(n_boot)
    draws = []
    for child in seeds:
        seed = int(child.generate_state(1)[0])
        try:
            sim = simulate_reduced_form(rf, spec, data.T, seed, init=init, bound=data.bound, exog=data.exog,
                                        names=tuple(data.endog_names[j] for j in order),
                                        exog_names=data.exog_names, dates=data.dates, allow_explosive=True)
            refit = fit(replace(spec, constrained_index=None), sim.dataset, options)
            candidates = [pt for pt in solve_point(refit.params.betatilde, refit.params.Omega, point.xi)
                          if pt.accepted]
            if not candidates:
                continue
            nearest = min(candidates, key=lambda pt: float(np.sum((pt.beta - point.beta) ** 2)))
            boot = girf(nearest, refit, sim.dataset, refit.latent, req)
            draws.append(boot.response[:, [sim.dataset.endog_names.index(v) for v in center.variables]])
        except CKSVARError as exc:
            logger.warning("bootstrap replication skipped: %s", exc)
    if not draws:
        raise EmptyIdentifiedSetError("no bootstrap replication produced a response")
    stack = np.stack(draws)
    tail = 0.5 * (1.0 - level)
    return IRFResult(
        variables=center.variables, horizons=center.horizons, response=center.response,
        lower=np.quantile(stack, tail, axis=0), upper=np.quantile(stack, 1.0 - tail, axis=0),
        mc_se=center.mc_se, date=center.date, regime=center.regime, draws=req.draws, points=1,
        notes=[f"parametric bootstrap, {len(draws)} of {n_boot} replications, level {level}"],
    )
