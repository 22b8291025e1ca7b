import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy import linalg, optimize

from app.config import get_settings
from app.errors import EmptyIdentifiedSetError, SingularityError
from app.Model.core_model import gamma_from, is_coherent, kappa_factor
from app.Model.likelihood import LatentEstimate
from app.Model.types import ReducedFormParams

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
DAMPING = 0.5
MAX_ITER = 500


@dataclass(frozen=True, eq=False)
class IdentifiedPoint:
    xi: float
    beta: np.ndarray
    gamma: np.ndarray
    accepted: bool
    rejection_reason: str = ""
    solution_index: int = 0
    residual: float = 0.0
    violation: Optional[Dict[str, Any]] = None
    continuum: bool = False

    @property
    def gamma_beta(self) -> float:
        return float(self.gamma @ self.beta)

    def kappa(self, alpha: float = 0.0) -> float:
        return kappa_factor(self.xi, self.beta, self.gamma, alpha)

    def reject(self, reason: str, violation: Optional[Dict[str, Any]] = None) -> "IdentifiedPoint":
        return replace(self, accepted=False, rejection_reason=reason, violation=violation)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "xi": self.xi, "beta": self.beta.tolist(), "gamma": self.gamma.tolist(),
            "accepted": self.accepted, "rejection_reason": self.rejection_reason,
            "solution_index": self.solution_index, "residual": self.residual,
            "violation": self.violation, "continuum": self.continuum,
        }


@dataclass
class IdentifiedSet:
    points: List[IdentifiedPoint]
    betatilde: np.ndarray
    omega: np.ndarray
    grid: np.ndarray
    bounds: Tuple[float, float] = (0.0, 1.0)
    notes: List[str] = field(default_factory=list)

    def accepted(self) -> List[IdentifiedPoint]:
        return [pt for pt in self.points if pt.accepted]

    def xi_projection(self) -> Optional[Tuple[float, float]]:
        xs = [pt.xi for pt in self.accepted()]
        return (min(xs), max(xs)) if xs else None

    def xi_intervals(self) -> List[Tuple[float, float]]:
        """Maximal runs of consecutive grid values with at least one accepted solution."""
        accepted = {pt.xi for pt in self.accepted()}
        runs, start, prev = [], None, None
        for xi in self.grid:
            if xi in accepted:
                start = xi if start is None else start
                prev = xi
            elif start is not None:
                runs.append((float(start), float(prev)))
                start = None
        if start is not None:
            runs.append((float(start), float(prev)))
        return runs

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for pt in self.points:
            row = {"xi": pt.xi, "solution": pt.solution_index, "accepted": pt.accepted,
                   "reason": pt.rejection_reason, "residual": pt.residual}
            row.update({f"beta{j + 1}": b for j, b in enumerate(pt.beta)})
            row.update({f"gamma{j + 1}": g for j, g in enumerate(pt.gamma)})
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "bounds": list(self.bounds),
            "grid_step": float(self.grid[1] - self.grid[0]) if self.grid.size > 1 else None,
            "xi_projection": self.xi_projection(),
            "xi_intervals": self.xi_intervals(),
            "betatilde": self.betatilde.tolist(),
            "omega": self.omega.tolist(),
            "notes": list(self.notes),
            "points": [pt.to_dict() for pt in self.points],
        }


def xi_grid(step: float = 0.005, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(n + 1), 10)


def _residual(betatilde: np.ndarray, omega: np.ndarray, xi: float, beta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    denom = 1.0 - xi * float(gamma @ beta)
    return np.concatenate([
        betatilde * denom - (1.0 - xi) * beta,
        gamma - gamma_from(omega, beta),
    ])


def _quadratic_roots(betatilde: np.ndarray, omega: np.ndarray, xi: float) -> List[float]:
    """Scale factors c with beta = c * betatilde.

    With a = betatilde' Omega11^-1 Omega12, r = betatilde' Omega11^-1 betatilde
    and e = a^2 + r (Omega22 - Omega21 Omega11^-1 Omega12), the two equations
    collapse to c^2 [a(1-xi) + xi e] - c [1 - xi + a(1+xi)] + 1 = 0.
    """
    O11, O12, O22 = omega[:-1, :-1], omega[:-1, -1], omega[-1, -1]
    factor = linalg.cho_factor(O11, lower=True)
    inv_bt = linalg.cho_solve(factor, betatilde)
    a = float(O12 @ inv_bt)
    r = float(betatilde @ inv_bt)
    d = float(O12 @ linalg.cho_solve(factor, O12))
    e = a * a + r * (O22 - d)
    quad, lin = a * (1.0 - xi) + xi * e, -(1.0 - xi + a * (1.0 + xi))
    if abs(quad) < 1e-14:
        return [] if abs(lin) < 1e-14 else [-1.0 / lin]
    roots = np.roots([quad, lin, 1.0])
    return sorted(float(np.real(c)) for c in roots if abs(np.imag(c)) < 1e-10 * max(1.0, abs(c)))


def _polish(betatilde, omega, xi, beta, gamma) -> Tuple[np.ndarray, np.ndarray, float]:
    """Damped fixed-point refinement with a Newton fallback on the stacked residual."""
    n = beta.size
    for _ in range(MAX_ITER):
        gb = float(gamma @ beta)
        new_beta = betatilde * (1.0 - xi * gb) / (1.0 - xi) if xi != 1.0 else beta
        new_gamma = gamma_from(omega, new_beta)
        step = max(np.max(np.abs(new_beta - beta)), np.max(np.abs(new_gamma - gamma)))
        beta = DAMPING * beta + (1.0 - DAMPING) * new_beta
        gamma = DAMPING * gamma + (1.0 - DAMPING) * new_gamma
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(gamma))):
            break
        if step < 1e-14:
            break
    res = _residual(betatilde, omega, xi, beta, gamma) if np.all(np.isfinite(beta)) else np.array([np.inf])
    if np.max(np.abs(res)) < RESIDUAL_TOL:
        return beta, gamma, float(np.max(np.abs(res)))

    def stacked(z):
        return _residual(betatilde, omega, xi, z[:n], z[n:])

    sol = optimize.root(stacked, np.concatenate([beta, gamma]) if np.all(np.isfinite(beta)) else np.zeros(2 * n),
                        method="hybr", options={"xtol": 1e-14})
    res = stacked(sol.x)
    return sol.x[:n], sol.x[n:], float(np.max(np.abs(res)))


def solve_point(betatilde: np.ndarray, omega: np.ndarray, xi: float) -> List[IdentifiedPoint]:
    """Every (beta, gamma) consistent with (betatilde, Omega) at one value of xi."""
    betatilde = np.atleast_1d(np.asarray(betatilde, dtype=float))
    omega = np.asarray(omega, dtype=float)
    guard = get_settings().singularity_guard
    zero_kink = bool(np.all(np.abs(betatilde) < 1e-14))
    candidates: List[Tuple[np.ndarray, np.ndarray, bool]] = []

    if abs(1.0 - xi) < 1e-12:
        if not zero_kink:
            return []
        beta = np.zeros_like(betatilde)
        candidates.append((beta, gamma_from(omega, beta), True))
    elif zero_kink:
        beta = np.zeros_like(betatilde)
        candidates.append((beta, gamma_from(omega, beta), False))
    elif abs(xi) < 1e-14:
        candidates.append((betatilde.copy(), gamma_from(omega, betatilde), False))
    else:
        for c in _quadratic_roots(betatilde, omega, xi):
            beta = c * betatilde
            try:
                gamma = gamma_from(omega, beta)
            except SingularityError:
                continue
            candidates.append((beta, gamma, False))

    points = []
    for index, (beta, gamma, continuum) in enumerate(candidates):
        try:
            res = float(np.max(np.abs(_residual(betatilde, omega, xi, beta, gamma))))
            if res >= RESIDUAL_TOL and not continuum:
                beta, gamma, res = _polish(betatilde, omega, xi, beta, gamma)
        except (SingularityError, linalg.LinAlgError):
            continue
        if res >= RESIDUAL_TOL:
            logger.debug("xi=%.4f: solution %d did not converge (residual %.2e)", xi, index, res)
            continue
        gb = float(gamma @ beta)
        accepted = is_coherent(xi, gb, guard)
        points.append(IdentifiedPoint(
            xi=float(xi), beta=beta, gamma=gamma, accepted=accepted,
            rejection_reason="" if accepted else "incoherent",
            solution_index=len(points), residual=res, continuum=continuum,
        ))
    return points


def solve_identified_set(rf: ReducedFormParams, grid: Optional[Sequence[float]] = None,
                         bounds: Tuple[float, float] = (0.0, 1.0), workers: Optional[int] = None) -> IdentifiedSet:
    grid = xi_grid(lo=bounds[0], hi=bounds[1]) if grid is None else np.asarray(grid, dtype=float)
    if np.any(grid < bounds[0] - 1e-12) or np.any(grid > bounds[1] + 1e-12):
        raise ValueError(f"xi grid leaves the configured bounds {bounds}")
    betatilde, omega = rf.betatilde, rf.Omega
    with ThreadPoolExecutor(max_workers=workers or get_settings().workers) as pool:
        per_xi = list(pool.map(lambda xi: solve_point(betatilde, omega, float(xi)), grid))
    points = [pt for pts in per_xi for pt in pts]
    notes = []
    if any(pt.continuum for pt in points):
        notes.append("xi=1 with zero kink: every beta solves; represented by beta=0")
    result = IdentifiedSet(points=points, betatilde=betatilde.copy(), omega=omega.copy(), grid=grid,
                           bounds=tuple(bounds), notes=notes)
    logger.info("identified set: %d solutions, %d accepted, xi projection %s",
                len(points), len(result.accepted()), result.xi_projection())
    return result


Sign = Literal[">=0", "<=0", "free"]


class SignRestrictionSpec(BaseModel):
    signs: Dict[str, Sign] = Field(default_factory=dict)
    horizons: Tuple[int, int] = (0, 4)
    shock: float = -0.25
    dates: Optional[List[str]] = None
    draws: int = Field(default=200, ge=1)
    seed: int = Field(default=0, ge=0)
    tolerance: float = Field(default=0.0, ge=0.0)

    @field_validator("horizons")
    @classmethod
    def _ordered(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] < 0 or value[1] < value[0]:
            raise ValueError("horizons must satisfy 0 <= first <= last")
        return value

    @property
    def active(self) -> Dict[str, Sign]:
        return {name: sign for name, sign in self.signs.items() if sign != "free"}


def _first_violation(irf, srs: SignRestrictionSpec, date: str) -> Optional[Dict[str, Any]]:
    lo, hi = srs.horizons
    for h in range(lo, hi + 1):
        for name, sign in srs.active.items():
            value = float(irf.response_of(name)[h])
            if (sign == ">=0" and value < -srs.tolerance) or (sign == "<=0" and value > srs.tolerance):
                return {"date": date, "horizon": h, "variable": name, "value": value}
    return None


def apply_sign_restrictions(identified: IdentifiedSet, est, data, srs: SignRestrictionSpec,
                            irf_engine: Optional[Callable] = None, latent: Optional[LatentEstimate] = None,
                            workers: Optional[int] = None) -> IdentifiedSet:
    """Keep only accepted points whose responses satisfy every sign at every date and horizon."""
    from app.Identification.irf import IRFRequest, girf

    irf_engine = irf_engine or girf
    if not srs.active:
        return identified
    latent = latent or est.latent
    dates = srs.dates or list(latent.dates)
    req = IRFRequest(shock=srs.shock, horizon=srs.horizons[1], draws=srs.draws, seed=srs.seed)

    def check(point: IdentifiedPoint) -> IdentifiedPoint:
        if not point.accepted:
            return point
        for date in dates:
            irf = irf_engine(point, est, data, latent, req.model_copy(update={"date": date}))
            violation = _first_violation(irf, srs, date)
            if violation is not None:
                return point.reject("sign restriction", violation)
        return point

    with ThreadPoolExecutor(max_workers=workers or get_settings().workers) as pool:
        points = list(pool.map(check, identified.points))
    out = replace(identified, points=points)
    logger.info("sign restrictions: %d of %d points survive, xi projection %s",
                len(out.accepted()), len(identified.accepted()), out.xi_projection())
    return out


def shadow_rate_path(point: IdentifiedPoint, alpha: float, latent: LatentEstimate,
                     bound: Optional[np.ndarray] = None) -> np.ndarray:
    """Observed rate off the bound; kappa*Ybar2 + (1-kappa)*b at the bound."""
    kappa = kappa_factor(point.xi, point.beta, point.gamma, alpha)
    b = latent.bound if bound is None else np.broadcast_to(np.asarray(bound, dtype=float), latent.bound.shape)
    return np.where(latent.elb, kappa * latent.smoothed_mean + (1.0 - kappa) * b, latent.observed)


def shadow_rate_envelope(identified: IdentifiedSet, alpha: float, latent: LatentEstimate) -> pd.DataFrame:
    accepted = identified.accepted()
    if not accepted:
        raise EmptyIdentifiedSetError("no accepted points to build a shadow-rate band")
    paths = np.vstack([shadow_rate_path(pt, alpha, latent) for pt in accepted])
    return pd.DataFrame({
        "date": list(latent.dates),
        "lower": paths.min(axis=0),
        "upper": paths.max(axis=0),
        "observed": latent.observed,
        "reduced_shadow": latent.reduced_shadow,
        "elb": latent.elb.astype(int),
    })
