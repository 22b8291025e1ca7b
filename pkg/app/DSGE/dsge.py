import logging
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg, optimize

from app.errors import ConvergenceError, DeterminacyError, SingularityError
from app.Model.core_model import is_coherent
from app.Model.types import ModelSpec, StructuralParams, Variant

logger = logging.getLogger(__name__)

RATE_SCALE = 400.0
OUTPUT_SCALE = 100.0
SHOCK_NAMES = ("i", "a", "b")
METHODS = ("piecewise", "occbin", "linear")
METHOD_ALIASES = {"prop2": "piecewise"}
VARIABLE_NAMES = ("y", "pi", "i")


def solution_method(name: str) -> str:
    """Canonical solver name for ``name``, accepting the short aliases."""
    method = METHOD_ALIASES.get(name, name)
    if method not in METHODS:
        raise ValueError(f"unknown solution method {name!r}; expected one of {METHODS + tuple(METHOD_ALIASES)}")
    return method


def elb_deviation(rate: float) -> float:
    """Bound on the gross-rate deviation when the steady-state net rate is ``rate``."""
    return -rate / (1.0 + rate)


@dataclass(frozen=True)
class DSGEParams:
    """Calibration of the log-linear model with the ELB, QE and forward guidance."""
    sigma: float = 2.0
    delta: float = 0.997
    kappa: float = 0.336
    rho_i: float = 0.7
    r_pi: float = 1.5
    r_y: float = 0.5
    rho_a: float = 0.9
    rho_b: float = 0.9
    chi_a: float = 0.25225
    chi_b: float = 0.45
    lambda_star: float = 1.0
    alpha: float = 0.0
    b: float = -0.01 / 1.01
    sigma_i: float = 1.0
    sigma_a: float = 1.0
    sigma_b: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            object.__setattr__(self, name, float(value))
        problems = []
        if not self.r_pi > 1.0:
            problems.append("r_pi must exceed 1 (Taylor principle)")
        if not 0.0 < self.delta < 1.0:
            problems.append("delta must lie in (0, 1)")
        for name in ("rho_i", "rho_a", "rho_b"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        if self.b > 0.0:
            problems.append("b must be nonpositive")
        if not 0.0 <= self.lambda_star <= 1.0:
            problems.append("lambda_star must lie in [0, 1]")
        if self.alpha < 0.0:
            problems.append("alpha must be nonnegative")
        for name in ("sigma", "kappa", "sigma_i", "sigma_a", "sigma_b"):
            if not getattr(self, name) > 0.0:
                problems.append(f"{name} must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def baseline(cls, **overrides: float) -> "DSGEParams":
        return cls(**overrides)

    @classmethod
    def from_deep(cls, dp: "DeepParams", sigma: float = 2.0, delta: float = 0.997, rho_b: float = 0.9,
                  **overrides: float) -> "DSGEParams":
        derived = derive_reduced_params(dp, sigma, delta, rho_b)
        return cls(sigma=sigma, delta=delta, rho_b=rho_b, **{**derived, **overrides})

    @property
    def xi_star(self) -> float:
        return self.lambda_star * (1.0 + self.alpha)

    def replace(self, **changes: float) -> "DSGEParams":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "xi_star": self.xi_star}


@dataclass(frozen=True)
class DeepParams:
    """Household, firm and bond-market primitives behind the reduced coefficients."""
    calvo: float = 0.75
    frisch: float = 0.5
    theta: float = 1.0
    markup: float = 1.1
    indexation: float = 1.0
    omega_u: float = 0.5
    cu_y: float = 0.8
    cr_y: float = 0.8
    zeta: float = 1.0
    rho_zeta: float = 1.0
    gamma_qe: float = 1.0
    mu: float = 0.975
    RL_bar: float = 1.01

    def __post_init__(self):
        problems = []
        for name in ("calvo", "omega_u", "cu_y", "cr_y"):
            if not 0.0 < getattr(self, name) < 1.0:
                problems.append(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.indexation <= 1.0:
            problems.append("indexation must lie in [0, 1]")
        for name in ("frisch", "theta", "zeta", "rho_zeta"):
            if not getattr(self, name) > 0.0:
                problems.append(f"{name} must be positive")
        if not self.markup > max(1.0, self.theta):
            problems.append("markup must exceed both 1 and theta")
        if not 0.0 < self.mu <= 1.0:
            problems.append("mu must lie in (0, 1]")
        if not self.RL_bar > self.mu:
            problems.append("RL_bar must exceed mu")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class PhillipsCurve:
    slope: float
    forward: float
    backward: float
    chi_a: float


def phillips_curve_coefficients(dp: DeepParams, sigma: float, delta: float) -> PhillipsCurve:
    """Phillips-curve coefficients with price indexation and production curvature.

    ``indexation`` = 1 means prices are not indexed to past inflation, so the
    backward weight vanishes and the forward coefficient is ``delta``.
    """
    c, nu, theta, lp, nu_p = dp.calvo, dp.frisch, dp.theta, dp.markup, dp.indexation
    if c == 0.0:
        raise ZeroDivisionError("Calvo probability must be nonzero")
    denom = c + 1.0 - nu_p
    base = (1.0 - c * delta) * (1.0 - c) * (lp - 1.0) * theta / ((lp - theta) * denom)
    return PhillipsCurve(
        slope=base * (nu + nu * theta * (sigma - 1.0) + 1.0) / (nu * theta),
        forward=c * delta / denom,
        backward=c * (1.0 - nu_p) / denom,
        chi_a=base * (1.0 + nu) / (nu * theta),
    )


def derive_reduced_params(dp: DeepParams, sigma: float, delta: float, rho_b: float) -> Dict[str, float]:
    pc = phillips_curve_coefficients(dp, sigma, delta)
    if abs(pc.backward) > 0.0:
        raise ValueError("the simulated model has no lagged inflation term; set indexation = 1")
    lam = (1.0 - dp.omega_u) * dp.cr_y * (dp.zeta / (1.0 + dp.zeta)) * dp.rho_zeta * dp.gamma_qe
    if lam > 1.0:
        logger.warning("derived lambda_star %.3f exceeds 1", lam)
    return {"lambda_star": lam, "kappa": pc.slope, "chi_a": pc.chi_a, "chi_b": rho_b / sigma}


@dataclass(frozen=True)
class ModelState:
    """Predetermined state entering a period: lagged effective rate and lagged shock processes."""
    i_eff: float = 0.0
    z_a: float = 0.0
    z_b: float = 0.0


@dataclass(frozen=True)
class DecisionRules:
    """Rules y_t = C x_{t-1} + D eps_t, x_t = A x_{t-1} + B eps_t for y = (y, pi, i*), xi* = 1.

    x = (i*, z_a, z_b) and eps = (eps_i, eps_a, eps_b).
    """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    G: np.ndarray

    @property
    def d(self) -> Dict[str, float]:
        out = {}
        for r, row in enumerate(("y", "pi", "i*")):
            out[f"{row},i*"] = float(self.C[r, 0])
            for c, col in enumerate(SHOCK_NAMES):
                out[f"{row},{col}"] = float(self.D[r, c])
        return out

    @property
    def persistence(self) -> float:
        return float(self.A[0, 0])

    def var1_residual(self) -> float:
        return _var1_residual(self.A, self.B, self.C, self.D)

    def long_rate_system(self, mu: float, RL_bar: float) -> Tuple[np.ndarray, np.ndarray]:
        f_i, f_a, f_b = long_rate_rules(self, mu, RL_bar)
        rho = np.diag(self.A)[1:]
        C, D = self.C.copy(), self.D.copy()
        C[2] = f_i * self.C[2] + np.array([0.0, rho[0] * f_a, rho[1] * f_b])
        D[2] = f_i * self.D[2] + np.array([0.0, f_a, f_b])
        return C, D

    def long_rate_residual(self, mu: float, RL_bar: float) -> float:
        C, D = self.long_rate_system(mu, RL_bar)
        return _var1_residual(self.A, self.B, C, D)

    def expectations(self, states: np.ndarray) -> np.ndarray:
        """E_t y_{t+1} for rows of end-of-period states (i*, z_a, z_b)."""
        return np.atleast_2d(states) @ self.C.T

    def euler_residuals(self, params: DSGEParams, states: np.ndarray,
                        shocks: Optional[np.ndarray] = None) -> np.ndarray:
        """Euler and Phillips residuals of the rules at lagged states x_{t-1}."""
        x = np.atleast_2d(np.asarray(states, dtype=float))
        eps = np.zeros_like(x) if shocks is None else np.atleast_2d(np.asarray(shocks, dtype=float))
        y = x @ self.C.T + eps @ self.D.T
        x_next = x @ self.A.T + eps @ self.B.T
        ey = self.expectations(x_next)
        euler = y[:, 0] - (ey[:, 0] - (y[:, 2] - ey[:, 1]) / params.sigma - params.chi_b * x_next[:, 2])
        phillips = y[:, 1] - (params.delta * ey[:, 1] + params.kappa * y[:, 0] - params.chi_a * x_next[:, 1])
        return np.column_stack([euler, phillips])

    def to_dict(self) -> Dict[str, Any]:
        return {"A": self.A, "B": self.B, "C": self.C, "D": self.D, "G": self.G,
                "d": self.d, "var1_residual": self.var1_residual()}


def _var1_residual(A, B, C, D) -> float:
    try:
        BDinvC = B @ linalg.solve(D, C)
    except linalg.LinAlgError as exc:
        raise SingularityError("shock loading matrix D is singular") from exc
    return float(np.max(np.abs(A - BDinvC)))


def _stable_root(params: DSGEParams) -> float:
    s, dl, k, ri = params.sigma, params.delta, params.kappa, params.rho_i
    # (q - rho_i) * Delta(q) + (1 - rho_i) q (r_pi kappa + r_y (1 - delta q)) = 0
    delta_poly = np.array([s * dl, -(s + s * dl + k), s])
    cubic = np.polyadd(np.polymul([1.0, -ri], delta_poly),
                       (1.0 - ri) * np.array([-params.r_y * dl, params.r_pi * k + params.r_y, 0.0]))
    roots = np.roots(cubic)
    stable = roots[np.abs(roots) < 1.0]
    if stable.size != 1:
        raise DeterminacyError(f"{stable.size} stable roots; the model is "
                               + ("indeterminate" if stable.size > 1 else "explosive"))
    if abs(stable[0].imag) > 1e-10:
        raise DeterminacyError("stable root is complex")
    q = float(stable[0].real)
    deriv = np.polyder(cubic)
    for _ in range(3):
        slope = np.polyval(deriv, q)
        if slope == 0.0:
            break
        q -= np.polyval(cubic, q) / slope
    return q


@lru_cache(maxsize=128)
def solve_linear_re(params: DSGEParams) -> DecisionRules:
    """Undetermined-coefficients solution of the model without the bound (xi* = 1)."""
    s, dl, k, ri = params.sigma, params.delta, params.kappa, params.rho_i
    q = _stable_root(params)
    gap = s * (1.0 - q) * (1.0 - dl * q) - q * k
    P_y = -(1.0 - dl * q) / (gap + (1.0 - ri) * (params.r_pi * k + params.r_y * (1.0 - dl * q)))
    P_pi = k * P_y / (1.0 - dl * q)
    P_i = 1.0 + (1.0 - ri) * (params.r_pi * P_pi + params.r_y * P_y)
    P = np.array([P_y, P_pi, P_i])

    def loadings(rho: float, rhs: np.ndarray) -> np.ndarray:
        M = np.array([
            [1.0 - rho, -rho / s, -P_y * ri + (1.0 - P_pi * ri) / s],
            [-k, 1.0 - dl * rho, -dl * P_pi * ri],
            [-(1.0 - ri) * params.r_y, -(1.0 - ri) * params.r_pi, 1.0],
        ])
        try:
            return linalg.solve(M, rhs)
        except linalg.LinAlgError as exc:
            raise DeterminacyError("shock loadings are not uniquely determined") from exc

    Qa = loadings(params.rho_a, np.array([0.0, -params.chi_a, 0.0]))
    Qb = loadings(params.rho_b, np.array([-params.chi_b, 0.0, 0.0]))
    rho = np.array([ri, params.rho_a, params.rho_b])
    D = np.column_stack([P, Qa, Qb])
    C = D * rho
    A = np.diag(rho)
    A[0] = [q, params.rho_a * Qa[2], params.rho_b * Qb[2]]
    B = np.eye(3)
    B[0] = D[2]
    if abs(np.linalg.det(D)) < 1e-14:
        raise SingularityError("shock loading matrix D is singular")
    G = linalg.solve(D.T, (C @ B).T).T

    if P_i != 0.0:
        ratio = q / P_i
        mismatch = max(abs(C[0, 0] - D[0, 0] * ratio), abs(C[1, 0] - D[1, 0] * ratio))
        if mismatch > 1e-10 * max(1.0, float(np.max(np.abs(D)))):
            raise DeterminacyError(f"rate-loading identities fail by {mismatch:.2e}")
    rules = DecisionRules(A=A, B=B, C=C, D=D, G=G)
    residual = rules.var1_residual()
    if residual > 1e-8:
        raise DeterminacyError(f"A - B D^-1 C residual {residual:.2e} is not zero")
    for arr in (A, B, C, D, G):
        arr.setflags(write=False)
    logger.debug("linear RE solution: persistence %.4f, rate impact %.4f", q, P_i)
    return rules


def long_rate_rules(rules: DecisionRules, mu: float, RL_bar: float) -> Tuple[float, float, float]:
    """Loadings of the long yield on (i*, z_a, z_b) when it prices the expected shadow-rate path."""
    if RL_bar <= 0.0:
        raise ValueError("RL_bar must be positive")
    a, c = (RL_bar - mu) / RL_bar, mu / RL_bar
    if not 0.0 <= c < 1.0:
        raise ValueError("mu / RL_bar must lie in [0, 1)")
    q = rules.persistence
    rho_a, rho_b = rules.A[1, 1], rules.A[2, 2]
    if max(abs(c * q), abs(c * rho_a), abs(c * rho_b)) >= 1.0:
        raise DeterminacyError("forward recursion of the long yield does not converge")
    f_i = a / (1.0 - c * q)
    f_a = c * f_i * rules.D[2, 1] * rho_a / (1.0 - c * rho_a)
    f_b = c * f_i * rules.D[2, 2] * rho_b / (1.0 - c * rho_b)
    return f_i, f_a, f_b


@dataclass
class SimPath:
    y: np.ndarray
    pi: np.ndarray
    i: np.ndarray
    i_star: np.ndarray
    i_taylor: np.ndarray
    i_eff: np.ndarray
    z_a: np.ndarray
    z_b: np.ndarray
    elb: np.ndarray
    method: str
    shocks: np.ndarray
    expected: np.ndarray
    init: ModelState
    bound: float

    def __post_init__(self):
        gap = np.abs(self.i - np.maximum(self.i_star, self.bound))
        if gap.size and float(np.max(gap)) > 1e-10:
            raise ValueError("policy rate differs from max(shadow rate, bound)")

    @property
    def T(self) -> int:
        return self.y.size

    def observables(self) -> np.ndarray:
        return np.column_stack([self.y, self.pi, self.i])

    def final_state(self) -> ModelState:
        return ModelState(float(self.i_eff[-1]), float(self.z_a[-1]), float(self.z_b[-1]))

    def spells(self) -> List[Tuple[int, int]]:
        out, start = [], None
        for t, flag in enumerate(self.elb):
            if flag and start is None:
                start = t
            elif not flag and start is not None:
                out.append((start, t - start))
                start = None
        if start is not None:
            out.append((start, self.T - start))
        return out

    def longest_spell(self) -> int:
        return max((n for _, n in self.spells()), default=0)

    def to_frame(self, scaled: bool = True) -> pd.DataFrame:
        rate, out = (RATE_SCALE, OUTPUT_SCALE) if scaled else (1.0, 1.0)
        return pd.DataFrame({
            "period": np.arange(1, self.T + 1),
            "y": self.y * out,
            "pi": self.pi * rate,
            "i": self.i * rate,
            "i_star": self.i_star * rate,
            "i_taylor": self.i_taylor * rate,
            "i_eff": self.i_eff * rate,
            "z_a": self.z_a,
            "z_b": self.z_b,
            "elb": self.elb.astype(bool),
        })

    def to_dict(self) -> Dict[str, Any]:
        return {"method": self.method, "bound": self.bound, "init": asdict(self.init),
                "spells": self.spells(), "path": self.to_frame().to_dict(orient="list")}


ShockInput = Union[None, np.ndarray, Mapping[str, Any]]


def shock_matrix(shocks: ShockInput, T: Optional[int] = None) -> np.ndarray:
    """(T, 3) array of (eps_i, eps_a, eps_b).

    A mapping may give each shock as a sequence or as ``{period_index: value}``.
    """
    if shocks is None or isinstance(shocks, Mapping):
        if T is None:
            raise ValueError("T is required when shocks are not given as an array")
        out = np.zeros((T, 3))
        for name, values in (shocks or {}).items():
            if name not in SHOCK_NAMES:
                raise ValueError(f"unknown shock {name!r}; expected one of {SHOCK_NAMES}")
            col = SHOCK_NAMES.index(name)
            if isinstance(values, Mapping):
                for t, v in values.items():
                    out[int(t), col] = float(v)
            else:
                v = np.asarray(values, dtype=float)
                out[: v.size, col] = v[:T]
        return out
    out = np.asarray(shocks, dtype=float)
    if out.ndim != 2 or out.shape[1] != 3:
        raise ValueError("shock array must have shape (T, 3)")
    if T is not None and out.shape[0] != T:
        raise ValueError(f"shock array has {out.shape[0]} rows, expected {T}")
    return out


@dataclass(frozen=True)
class StaticBlock:
    """Within-period solution given the effective rate: (y, pi) = rate_loading*i_eff + shock_loading @ z."""
    rate_loading: np.ndarray
    shock_loading: np.ndarray
    policy_response: np.ndarray
    stacking: np.ndarray
    rate_term: np.ndarray
    shock_term: np.ndarray

    @property
    def feedback(self) -> float:
        return float(self.policy_response @ self.rate_loading)


def static_block(params: DSGEParams, rules: Optional[DecisionRules] = None) -> StaticBlock:
    """Stack the Euler and Phillips equations with expectations from the xi* = 1 rules."""
    rules = rules or solve_linear_re(params)
    c_y, c_pi = rules.C[0], rules.C[1]
    s, dl = params.sigma, params.delta
    H1 = np.array([[1.0, 0.0], [-params.kappa, 1.0]])
    H2 = np.array([c_y[0] - 1.0 / s + c_pi[0] / s, dl * c_pi[0]])
    L = np.array([
        [c_y[1] + c_pi[1] / s, c_y[2] + c_pi[2] / s - params.chi_b],
        [dl * c_pi[1] - params.chi_a, dl * c_pi[2]],
    ])
    if abs(np.linalg.det(H1)) < 1e-14:
        raise SingularityError("stacking matrix of the static block is singular")
    return StaticBlock(
        rate_loading=linalg.solve(H1, H2),
        shock_loading=linalg.solve(H1, L),
        policy_response=(1.0 - params.rho_i) * np.array([params.r_y, params.r_pi]),
        stacking=H1, rate_term=H2, shock_term=L,
    )


def _run_piecewise(params: DSGEParams, eps: np.ndarray, init: ModelState, bound: float,
                   method: str) -> SimPath:
    rules = solve_linear_re(params)
    blk = static_block(params, rules)
    xi = params.xi_star
    fb = blk.feedback
    if np.isfinite(bound) and not is_coherent(xi, fb):
        raise SingularityError(f"piecewise solution is incoherent at xi* = {xi:.3f}")
    T = eps.shape[0]
    cols = {name: np.zeros(T) for name in ("y", "pi", "i", "i_star", "i_taylor", "i_eff", "z_a", "z_b")}
    elb = np.zeros(T, dtype=bool)
    expected = np.zeros((T, 2))
    ie_prev, za, zb = init.i_eff, init.z_a, init.z_b
    phi_shock = blk.policy_response @ blk.shock_loading
    for t in range(T):
        za = params.rho_a * za + eps[t, 1]
        zb = params.rho_b * zb + eps[t, 2]
        z = np.array([za, zb])
        N = params.rho_i * ie_prev + eps[t, 0] + phi_shock @ z
        i_taylor = N / (1.0 - fb)
        if i_taylor >= bound:
            ie = i_star = i = i_taylor
        else:
            const = (1.0 - xi) * bound
            i_taylor = (N + fb * const) / (1.0 - xi * fb)
            ie = const + xi * i_taylor
            i = bound
            i_star = -params.alpha * bound + (1.0 + params.alpha) * i_taylor
            elb[t] = True
        y1 = blk.rate_loading * ie + blk.shock_loading @ z
        for name, value in (("y", y1[0]), ("pi", y1[1]), ("i", i), ("i_star", i_star),
                            ("i_taylor", i_taylor), ("i_eff", ie), ("z_a", za), ("z_b", zb)):
            cols[name][t] = value
        expected[t] = rules.C[:2] @ np.array([ie, za, zb])
        ie_prev = ie
    return SimPath(**cols, elb=elb, method=method, shocks=eps, expected=expected, init=init, bound=bound)


def simulate_piecewise(params: DSGEParams, shocks: ShockInput = None, T: Optional[int] = None,
                   init: Optional[ModelState] = None) -> SimPath:
    """Piecewise-linear path: expectations from the xi* = 1 rules, the bound applied period by period."""
    eps = shock_matrix(shocks, T)
    return _run_piecewise(params, eps, init or ModelState(), params.b, "piecewise")


def simulate_linear(params: DSGEParams, shocks: ShockInput = None, T: Optional[int] = None,
                    init: Optional[ModelState] = None) -> SimPath:
    """No-ELB counterfactual: the policy rate always equals the shadow rate."""
    eps = shock_matrix(shocks, T)
    return _run_piecewise(params, eps, init or ModelState(), -np.inf, "linear")


def simulate_path(params: DSGEParams, shocks: ShockInput = None, T: Optional[int] = None,
                  init: Optional[ModelState] = None, method: str = "piecewise", horizon: int = 200) -> SimPath:
    method = solution_method(method)
    if method == "piecewise":
        return simulate_piecewise(params, shocks, T, init)
    if method == "linear":
        return simulate_linear(params, shocks, T, init)
    if method == "occbin":
        from app.DSGE.occbin import solve_occbin

        return solve_occbin(params, init, shocks, T=T, horizon=horizon)
    raise AssertionError(method)


def equation_residuals(params: DSGEParams, path: SimPath, method: Optional[str] = None) -> pd.DataFrame:
    """Per-period residuals of the model equations using the expectations the solver formed."""
    method = solution_method(method or path.method)
    ie_prev = np.concatenate([[path.init.i_eff], path.i_eff[:-1]])
    Ey, Epi = path.expected[:, 0], path.expected[:, 1]
    lam, alpha = params.lambda_star, params.alpha
    if method == "linear":
        lam, alpha = 1.0, 0.0
    frame = pd.DataFrame({
        "euler": path.y - (Ey - (path.i_eff - Epi) / params.sigma - params.chi_b * path.z_b),
        "phillips": path.pi - (params.delta * Epi + params.kappa * path.y - params.chi_a * path.z_a),
        "taylor": path.i_taylor - (params.rho_i * ie_prev + (1.0 - params.rho_i)
                                   * (params.r_pi * path.pi + params.r_y * path.y) + path.shocks[:, 0]),
        "shadow": path.i_star - (-alpha * path.i + (1.0 + alpha) * path.i_taylor),
        "bound": path.i - np.maximum(path.i_star, path.bound),
        "effective": path.i_eff - ((1.0 - lam) * path.i + lam * path.i_star),
    })
    return frame


def demand_shock_for_spell(params: DSGEParams, min_spell: int = 4, periods: Sequence[int] = (0,),
                           method: str = "piecewise", T: Optional[int] = None) -> float:
    """Smallest contractionary demand innovation (hitting ``periods``) whose no-UMP ELB spell lasts ``min_spell``."""
    if min_spell < 1:
        raise ValueError("min_spell must be at least 1")
    no_ump = params.replace(lambda_star=0.0, alpha=0.0)
    direction = 1.0 if solve_linear_re(params).D[2, 2] < 0.0 else -1.0
    T = T or max(periods) + 4 * min_spell + 20
    rows = list(periods)

    def excess(size: float) -> float:
        eps = np.zeros((T, 3))
        eps[rows, 2] = direction * size
        return simulate_path(no_ump, eps, method=method).longest_spell() - min_spell + 0.5

    hi = 1e-3
    while excess(hi) < 0.0:
        hi *= 2.0
        if hi > 10.0:
            raise ConvergenceError(f"no demand shock produces a {min_spell}-period ELB spell")
    size = optimize.bisect(excess, 0.0, hi, xtol=1e-10) + 2e-10
    for _ in range(50):
        if excess(size) > 0.0:
            break
        size *= 1.0 + 1e-9
    logger.info("demand shock %.6g gives a no-UMP ELB spell of at least %d periods", size, min_spell)
    return direction * size


def elb_initial_state(params: DSGEParams, demand_shock: Optional[float] = None, min_spell: int = 4,
                      horizon: int = 200) -> ModelState:
    """State after a severe demand shock, computed with the piecewise-linear perfect-foresight solver."""
    from app.DSGE.occbin import solve_occbin

    if demand_shock is None:
        demand_shock = demand_shock_for_spell(params, min_spell, method="occbin")
    path = solve_occbin(params, None, {"b": [demand_shock]}, T=1, horizon=horizon)
    if not path.elb[0]:
        logger.warning("initial demand shock %.4g does not reach the bound", demand_shock)
    return path.final_state()


def dsge_girf(params: DSGEParams, method: str = "piecewise", init: Optional[ModelState] = None,
              shock: float = -0.25, horizon: int = 12, demand_shock: Optional[float] = None,
              min_spell: int = 4) -> pd.DataFrame:
    """Response to a policy-rule shock of ``shock`` annualized percentage points.

    Difference between paired paths from the same initial state with and
    without the shock; rates and inflation in annualized pp, output in percent.
    """
    method = solution_method(method)
    if init is None:
        init = elb_initial_state(params, demand_shock, min_spell)
    base = np.zeros((horizon + 1, 3))
    hit = base.copy()
    hit[0, 0] = shock / RATE_SCALE
    p0 = simulate_path(params, base, init=init, method=method)
    p1 = simulate_path(params, hit, init=init, method=method)
    frame = pd.DataFrame({
        "horizon": np.arange(horizon + 1),
        "i": (p1.i - p0.i) * RATE_SCALE,
        "i_star": (p1.i_star - p0.i_star) * RATE_SCALE,
        "y": (p1.y - p0.y) * OUTPUT_SCALE,
        "pi": (p1.pi - p0.pi) * RATE_SCALE,
        "elb": p0.elb,
    })
    frame.attrs.update({"method": method, "xi_star": params.xi_star, "shock_pp": shock, "init": asdict(init)})
    return frame


@dataclass(frozen=True)
class CKSVARExport:
    """CKSVAR(1) representation of the piecewise-linear model, variables ordered (y, pi, i)."""
    structural: StructuralParams
    spec: ModelSpec
    bound: float
    shock_loading: np.ndarray
    sigma_i: float
    names: Tuple[str, ...] = VARIABLE_NAMES

    def structural_shocks(self, shocks: ShockInput, T: Optional[int] = None) -> np.ndarray:
        """Map model innovations (eps_i, eps_a, eps_b) to standardized CKSVAR shocks (eps1, eps2)."""
        eps = shock_matrix(shocks, T)
        y1_errors = eps[:, 1:] @ self.shock_loading.T
        eps1 = linalg.solve_triangular(self.structural.A11inv, y1_errors.T, lower=True).T
        return np.column_stack([eps1, eps[:, 0] / self.sigma_i])

    def to_dict(self) -> Dict[str, Any]:
        return {"structural": self.structural.to_dict(), "spec": self.spec.to_dict(),
                "bound": self.bound, "names": list(self.names)}


def export_as_cksvar(params: DSGEParams) -> CKSVARExport:
    """Structural CKSVAR coefficients that reproduce ``simulate_piecewise`` exactly."""
    rules = solve_linear_re(params)
    blk = static_block(params, rules)
    h, loading = blk.rate_loading, blk.shock_loading
    R = np.diag([params.rho_a, params.rho_b])
    try:
        K = loading @ R @ linalg.inv(loading)
    except linalg.LinAlgError as exc:
        raise SingularityError("shock loadings of the static block are singular") from exc
    Kh = K @ h
    cov = loading @ np.diag([params.sigma_a ** 2, params.sigma_b ** 2]) @ loading.T
    structural = StructuralParams(
        beta=h,
        lam=params.lambda_star,
        alpha=params.alpha,
        gamma=blk.policy_response,
        B1=np.column_stack([K, -Kh]),
        B12star=(-params.lambda_star * Kh).reshape(2, 1),
        B2=np.array([0.0, 0.0, params.rho_i]),
        B22star=np.array([params.rho_i * params.lambda_star]),
        A11inv=linalg.cholesky(cov, lower=True),
        A22starinv=params.sigma_i,
    )
    variant = Variant.KSVAR if params.lambda_star == 0.0 else Variant.CKSVAR
    spec = ModelSpec(variant=variant, p=1, constrained_index=2, include_intercept=False)
    return CKSVARExport(structural=structural, spec=spec, bound=params.b,
                        shock_loading=loading, sigma_i=params.sigma_i)
