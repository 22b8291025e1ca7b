import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from app.config import get_settings
from app.errors import DataValidationError, InsufficientSampleError, SimulationError, SingularityError
from app.Model.types import (
    Dataset,
    ModelSpec,
    ReducedFormParams,
    RegimePath,
    RegressorBundle,
    SimulatedPath,
    StructuralParams,
    Variant,
)

logger = logging.getLogger(__name__)

EXPLOSION_LIMIT = 1e8
ArrayLike = Union[float, Sequence[float], np.ndarray]


def _spells(D: np.ndarray) -> Tuple[Tuple[int, int], ...]:
    spells = []
    start = None
    for t, flag in enumerate(D):
        if flag and start is None:
            start = t
        elif not flag and start is not None:
            spells.append((start, t - 1))
            start = None
    if start is not None:
        spells.append((start, len(D) - 1))
    return tuple(spells)


def detect_regimes(data: Dataset, tol: Optional[float] = None) -> RegimePath:
    """D_t = 1 iff the constrained column sits within ``tol`` of its bound."""
    tol = get_settings().bound_tol if tol is None else tol
    y2, b = data.y2, data.bound
    if not (np.all(np.isfinite(y2)) and np.all(np.isfinite(b))):
        raise DataValidationError("regime detection needs finite policy rate and bound")
    D = (y2 <= b + tol).astype(np.int8)
    D.setflags(write=False)
    return RegimePath(D=D, spells=_spells(D))


def resolve_order(data: Dataset, spec: ModelSpec) -> List[int]:
    return data.internal_order(spec.constrained_index)


def regressor_labels(endog_names: Sequence[str], p: int, include_intercept: bool,
                     exog_names: Sequence[str] = ()) -> Tuple[str, ...]:
    labels = ["const"] if include_intercept else []
    for j in range(1, p + 1):
        labels.extend(f"{name}_L{j}" for name in endog_names)
    labels.extend(exog_names)
    return tuple(labels)


def y2_lag_columns(k: int, p: int, include_intercept: bool) -> Tuple[int, ...]:
    offset = 1 if include_intercept else 0
    return tuple(offset + (j - 1) * k + (k - 1) for j in range(1, p + 1))


def latent_labels(policy_name: str, p: int) -> Tuple[str, ...]:
    return tuple(f"{policy_name}*_L{j}" for j in range(1, p + 1))


def build_regressors(
    data: Dataset,
    spec: ModelSpec,
    latent: Optional[np.ndarray] = None,
    condition_on: Optional[int] = None,
    tol: Optional[float] = None,
) -> RegressorBundle:
    """Stack intercept, p lags of every endogenous variable and the exogenous controls.

    ``condition_on`` fixes how many leading observations are conditioned on
    (at least p), so fits with different p can share an estimation sample.
    ``latent`` is an optional length-T shadow path; without it, slots whose
    lag was at the bound are NaN.
    """
    p = spec.p
    start = p if condition_on is None else int(condition_on)
    if start < p:
        raise ValueError(f"condition_on={start} is smaller than the lag order {p}")
    order = resolve_order(data, spec)
    Y = data.values[:, order]
    k = Y.shape[1]
    endog = tuple(data.endog_names[j] for j in order)
    labels = regressor_labels(endog, p, spec.include_intercept, data.exog_names)
    n_x = len(labels)
    t_eff = data.T - start
    if t_eff <= n_x:
        raise InsufficientSampleError(
            f"{t_eff} usable observations for {n_x} regressors per equation (T={data.T}, p={p})")

    regimes = detect_regimes(data, tol)
    D = np.asarray(regimes.D, dtype=bool)
    rows = np.arange(start, data.T)
    blocks = [np.ones((t_eff, 1))] if spec.include_intercept else []
    for j in range(1, p + 1):
        blocks.append(Y[rows - j])
    blocks.append(data.exog[rows])
    X = np.column_stack(blocks) if blocks else np.zeros((t_eff, 0))

    lag_D = np.column_stack([D[rows - j] for j in range(1, p + 1)])
    slots = np.zeros((t_eff, p))
    for j in range(1, p + 1):
        lagged = rows - j
        if latent is None:
            slots[:, j - 1] = np.where(lag_D[:, j - 1], np.nan, 0.0)
        else:
            value = np.minimum(np.asarray(latent, dtype=float)[lagged] - data.bound[lagged], 0.0)
            slots[:, j - 1] = np.where(lag_D[:, j - 1], value, 0.0)
    presample = np.column_stack([(rows - j < start) & D[rows - j] for j in range(1, p + 1)])

    return RegressorBundle(
        y=Y[rows],
        X=X,
        labels=labels,
        bound=data.bound[rows].copy(),
        D=D[rows].copy(),
        lag_D=lag_D,
        latent_slots=slots,
        y2_lag_columns=y2_lag_columns(k, p, spec.include_intercept),
        dates=tuple(data.dates[t] for t in rows),
        start=start,
        endog_names=endog,
        latent_labels=latent_labels(endog[-1], p),
        presample_latent=presample,
    )


def _guarded(value: float, what: str) -> float:
    if abs(value) < get_settings().singularity_guard:
        raise SingularityError(f"{what} = {value:.3g} is below the singularity guard")
    return value


def kappa_factor(xi: float, beta: np.ndarray, gamma: np.ndarray, alpha: float = 0.0) -> float:
    """Scale between the structural and the reduced-form shadow gap at the bound."""
    gb = float(np.asarray(gamma) @ np.asarray(beta))
    return (1.0 + alpha) * (1.0 - gb) / _guarded(1.0 - xi * gb, "1 - xi*gamma*beta")


def is_coherent(xi: float, gamma_beta: float, guard: Optional[float] = None) -> bool:
    guard = get_settings().singularity_guard if guard is None else guard
    a, b = 1.0 - gamma_beta, 1.0 - xi * gamma_beta
    return a * b > 0.0 and abs(a) >= guard and abs(b) >= guard


def betatilde_from(xi: float, beta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    gb = float(np.asarray(gamma) @ beta)
    return (1.0 - xi) * beta / _guarded(1.0 - xi * gb, "1 - xi*gamma*beta")


def gamma_from(omega: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """gamma = (Omega21 - Omega22 beta')(Omega11 - Omega12 beta')^{-1}."""
    omega = np.asarray(omega, dtype=float)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    O11, O12, O22 = omega[:-1, :-1], omega[:-1, -1], omega[-1, -1]
    M = O11 - np.outer(O12, beta)
    row = O12 - O22 * beta
    try:
        return linalg.solve(M.T, row)
    except linalg.LinAlgError as exc:
        raise SingularityError("Omega11 - Omega12 beta' is singular") from exc


def identification_residuals(rf: ReducedFormParams, xi: float, beta: np.ndarray,
                             gamma: np.ndarray) -> Tuple[float, float]:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    r_bt = np.max(np.abs(rf.betatilde - betatilde_from(xi, beta, gamma)), initial=0.0)
    r_g = np.max(np.abs(gamma - gamma_from(rf.Omega, beta)), initial=0.0)
    return float(r_bt), float(r_g)


def structural_matrix(beta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    beta = np.atleast_1d(beta)
    n = beta.size
    A = np.eye(n + 1)
    A[:n, n] = -beta
    A[n, :n] = -np.asarray(gamma)
    return A


def reduced_from_structural(s: StructuralParams, spec: ModelSpec,
                            labels: Sequence[str] = ()) -> ReducedFormParams:
    """Reduced form implied by structural parameters.

    Off the bound the system is A Y = B X + B* X* + diag(A11^-1, A22*^-1) eps,
    A = [[I, -beta], [-gamma, 1]]. At the bound the structural shadow gap is
    kappa times the reduced-form gap, so the reduced latent loadings are
    kappa * A^-1 B*.
    """
    _guarded(1.0 - s.gamma_beta, "1 - gamma*beta")
    A = structural_matrix(s.beta, s.gamma)
    B = np.vstack([s.B1, s.B2[None, :]])
    Bstar = np.vstack([s.B12star, s.B22star[None, :]])
    lu = linalg.lu_factor(A)
    C = linalg.lu_solve(lu, B)
    kappa = kappa_factor(s.xi, s.beta, s.gamma, s.alpha)
    Cstar = kappa * linalg.lu_solve(lu, Bstar)
    if spec.variant == Variant.KSVAR:
        Cstar = np.zeros_like(Cstar)
    loading = linalg.block_diag(s.A11inv, np.array([[s.A22starinv]]))
    impact = linalg.lu_solve(lu, loading)
    omega = impact @ impact.T
    betatilde = betatilde_from(s.xi, s.beta, s.gamma)
    k = s.k
    rf = ReducedFormParams.from_omega(
        C=C, Cstar=Cstar, betatilde=betatilde, Omega=omega, labels=tuple(labels),
        y2_lag_columns=y2_lag_columns(k, spec.p, spec.include_intercept))
    r_bt, r_g = identification_residuals(rf, s.xi, s.beta, s.gamma)
    scale = max(1.0, float(np.max(np.abs(omega))))
    if max(r_bt, r_g) > 1e-10 * scale:
        raise SingularityError(f"identification residuals too large ({r_bt:.2e}, {r_g:.2e})")
    return rf


def impact_multipliers(beta: ArrayLike, gamma: ArrayLike, xi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Impact of a unit policy-rule shift on Y1 above and at the bound."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    gb = float(np.atleast_1d(np.asarray(gamma, dtype=float)) @ beta)
    above = beta / _guarded(1.0 - gb, "1 - gamma*beta")
    below = xi * beta / _guarded(1.0 - xi * gb, "1 - xi*gamma*beta")
    return above, below


def companion_matrix(rf: ReducedFormParams, spec: ModelSpec) -> np.ndarray:
    k, p = rf.k, spec.p
    offset = 1 if spec.include_intercept else 0
    top = rf.C[:, offset: offset + k * p]
    if p == 1:
        return top.copy()
    lower = np.hstack([np.eye(k * (p - 1)), np.zeros((k * (p - 1), k))])
    return np.vstack([top, lower])


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(linalg.eigvals(matrix)))) if matrix.size else 0.0


def _bound_path(bound: ArrayLike, total: int, T: int) -> np.ndarray:
    b = np.asarray(bound, dtype=float)
    if b.ndim == 0:
        return np.full(total, float(b))
    if b.size == total:
        return b.astype(float)
    if b.size == T:
        return np.concatenate([np.full(total - T, b[0]), b])
    raise DataValidationError(f"bound must be scalar or have {T} entries")


def _recurse(rf: ReducedFormParams, spec: ModelSpec, u: np.ndarray, init: np.ndarray,
             bound: np.ndarray, exog: np.ndarray, kappa: float) -> Tuple[np.ndarray, ...]:
    total, k = u.shape
    p = spec.p
    Y = np.zeros((total, k))
    Ybar2 = np.zeros(total)
    shadow = np.zeros(total)
    Y[:p] = init
    Ybar2[:p] = init[:, -1]
    shadow[:p] = init[:, -1]
    for t in range(p, total):
        parts = [np.ones(1)] if spec.include_intercept else []
        parts.extend(Y[t - j] for j in range(1, p + 1))
        parts.append(exog[t])
        x = np.concatenate(parts)
        slot = np.array([min(Ybar2[t - j] - bound[t - j], 0.0) for j in range(1, p + 1)])
        ybar = rf.C @ x + rf.Cstar @ slot + u[t]
        gap = ybar[-1] - bound[t]
        Ybar2[t] = ybar[-1]
        if gap >= 0.0:
            Y[t] = ybar
            shadow[t] = ybar[-1]
        else:
            Y[t, :-1] = ybar[:-1] - rf.betatilde * gap
            Y[t, -1] = bound[t]
            shadow[t] = bound[t] + kappa * gap
        if not np.all(np.isfinite(Y[t])) or np.max(np.abs(Y[t])) > EXPLOSION_LIMIT:
            raise SimulationError(f"simulated path exploded at step {t}")
    return Y, shadow, Ybar2


def _prepare_inputs(spec: ModelSpec, k: int, T: int, total: int, init, bound, exog):
    p = spec.p
    if T <= p:
        raise DataValidationError("T must exceed the lag order")
    b = _bound_path(bound, total, T)
    if exog is None:
        ex = np.zeros((total, 0))
    else:
        ex = np.asarray(exog, dtype=float).reshape(-1, np.shape(exog)[-1] if np.ndim(exog) > 1 else 1)
        if ex.shape[0] == T and total > T:
            ex = np.vstack([np.repeat(ex[:1], total - T, axis=0), ex])
        if ex.shape[0] != total:
            raise DataValidationError(f"exog must have {T} rows")
    if init is None:
        start = np.zeros((p, k))
        start[:, -1] = np.maximum(0.0, b[:p])
    else:
        start = np.asarray(init, dtype=float).reshape(p, k)
        if np.any(start[:, -1] < b[:p] - get_settings().bound_tol):
            raise DataValidationError("initial policy values are below the bound")
    return start, b, ex


def _check_stability(rf: ReducedFormParams, spec: ModelSpec, allow_explosive: bool) -> None:
    radius = spectral_radius(companion_matrix(rf, spec))
    if radius >= 1.0 and not allow_explosive:
        raise SimulationError(f"companion spectral radius {radius:.4f} >= 1 above the bound")


def _simulated_dataset(Y, b, ex, T, names, exog_names, dates, spec) -> Dataset:
    from app.serialization import quarter_labels

    k = Y.shape[1]
    names = tuple(names) if names else tuple(f"y{j + 1}" for j in range(k - 1)) + ("i",)
    exog_names = tuple(exog_names) if exog_names else tuple(f"x{j + 1}" for j in range(ex.shape[1]))
    return Dataset(
        dates=tuple(dates) if dates else quarter_labels("2000Q1", T),
        values=Y[-T:],
        bound=b[-T:],
        exog=ex[-T:],
        names=names + exog_names,
        constrained_index=k - 1,
        manifest={"source": "simulation", "spec": spec.to_dict()},
    )


def simulate(
    s: StructuralParams,
    spec: ModelSpec,
    T: int,
    seed: int,
    init: Optional[np.ndarray] = None,
    bound: ArrayLike = 0.0,
    exog: Optional[np.ndarray] = None,
    shocks: Optional[np.ndarray] = None,
    burn_in: int = 0,
    allow_explosive: bool = False,
    names: Sequence[str] = (),
    exog_names: Sequence[str] = (),
    dates: Sequence[str] = (),
) -> SimulatedPath:
    """Simulate T periods (the first p are the initial conditions).

    Structural shocks are standard normal unless ``shocks`` (rows aligned with
    the full burn-in + T path) is given. Columns come out as (Y1..., Y2).
    """
    if not is_coherent(s.xi, s.gamma_beta):
        raise SingularityError("structural parameters violate the coherency condition")
    rf = reduced_from_structural(s, spec)
    _check_stability(rf, spec, allow_explosive)
    total = T + burn_in
    k = s.k
    start, b, ex = _prepare_inputs(spec, k, T, total, init, bound, exog)
    if shocks is None:
        eps = np.random.default_rng(seed).standard_normal((total, k))
    else:
        eps = np.asarray(shocks, dtype=float).reshape(total, k)
    impact = linalg.solve(structural_matrix(s.beta, s.gamma),
                          linalg.block_diag(s.A11inv, np.array([[s.A22starinv]])))
    u = eps @ impact.T
    kappa = kappa_factor(s.xi, s.beta, s.gamma, s.alpha)
    Y, shadow, Ybar2 = _recurse(rf, spec, u, start, b, ex, kappa)
    logger.debug("simulated %d periods, %d at the bound", T, int(np.sum(Y[-T:, -1] <= b[-T:])))
    return SimulatedPath(
        dataset=_simulated_dataset(Y, b, ex, T, names, exog_names, dates, spec),
        shadow=shadow[-T:],
        reduced_shadow=Ybar2[-T:],
        shocks=eps[-T:],
    )


def simulate_reduced_form(
    rf: ReducedFormParams,
    spec: ModelSpec,
    T: int,
    seed: int,
    init: Optional[np.ndarray] = None,
    bound: ArrayLike = 0.0,
    exog: Optional[np.ndarray] = None,
    errors: Optional[np.ndarray] = None,
    burn_in: int = 0,
    allow_explosive: bool = False,
    names: Sequence[str] = (),
    exog_names: Sequence[str] = (),
    dates: Sequence[str] = (),
) -> SimulatedPath:
    """Forward recursion driven by u_t ~ N(0, Omega); shadow is the reduced-form one."""
    _check_stability(rf, spec, allow_explosive)
    total = T + burn_in
    start, b, ex = _prepare_inputs(spec, rf.k, T, total, init, bound, exog)
    if errors is None:
        z = np.random.default_rng(seed).standard_normal((total, rf.k))
        u = z @ rf.omega_chol.T
    else:
        z = np.asarray(errors, dtype=float).reshape(total, rf.k)
        u = z
    Y, _, Ybar2 = _recurse(rf, spec, u, start, b, ex, 1.0)
    return SimulatedPath(
        dataset=_simulated_dataset(Y, b, ex, T, names, exog_names, dates, spec),
        shadow=Ybar2[-T:],
        reduced_shadow=Ybar2[-T:],
        shocks=z[-T:],
    )
