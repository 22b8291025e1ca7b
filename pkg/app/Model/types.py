from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import get_settings
from app.errors import DataValidationError, NonPositiveDefiniteError, SingularityError

KINK = "kink"


class Variant(str, Enum):
    CKSVAR = "cksvar"
    KSVAR = "ksvar"
    CSVAR = "csvar"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Aligned quarterly sample with a per-period lower bound on one column."""
    dates: Tuple[str, ...]
    values: np.ndarray
    bound: np.ndarray
    exog: Optional[np.ndarray] = None
    names: Tuple[str, ...] = ()
    constrained_index: int = -1
    roles: Dict[str, str] = field(default_factory=dict)
    manifest: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise DataValidationError("values must be a T x k matrix")
        T, k = values.shape
        bound = np.broadcast_to(np.asarray(self.bound, dtype=float), (T,)).copy()
        exog = np.zeros((T, 0)) if self.exog is None else np.array(self.exog, dtype=float).reshape(T, -1)
        names = tuple(self.names) or tuple(f"y{j + 1}" for j in range(k)) + tuple(
            f"x{j + 1}" for j in range(exog.shape[1]))
        if len(names) != k + exog.shape[1]:
            raise DataValidationError(f"expected {k + exog.shape[1]} names, got {len(names)}")
        if len(self.dates) != T:
            raise DataValidationError(f"expected {T} dates, got {len(self.dates)}")
        if k < 2:
            raise DataValidationError("at least one unconstrained variable is required")
        ci = self.constrained_index % k
        for arr in (values, bound, exog):
            arr.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bound", bound)
        object.__setattr__(self, "exog", exog)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "dates", tuple(str(d) for d in self.dates))
        object.__setattr__(self, "constrained_index", ci)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.exog.shape[1]

    @property
    def endog_names(self) -> Tuple[str, ...]:
        return self.names[: self.k]

    @property
    def exog_names(self) -> Tuple[str, ...]:
        return self.names[self.k:]

    @property
    def policy_name(self) -> str:
        return self.endog_names[self.constrained_index]

    @property
    def y2(self) -> np.ndarray:
        return self.values[:, self.constrained_index]

    def internal_order(self, constrained_index: Optional[int] = None) -> List[int]:
        """Column order (Y1..., Y2) used by every model computation."""
        ci = self.constrained_index if constrained_index is None else constrained_index % self.k
        return [j for j in range(self.k) if j != ci] + [ci]

    def validate(self, tol: Optional[float] = None) -> "Dataset":
        tol = get_settings().bound_tol if tol is None else tol
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.exog)):
            bad = np.where(~np.isfinite(np.column_stack([self.values, self.exog])).all(axis=1))[0]
            raise DataValidationError(f"missing values at {[self.dates[i] for i in bad[:5]]}")
        if not np.all(np.isfinite(self.bound)):
            raise DataValidationError("bound must be finite for every period")
        below = np.where(self.y2 < self.bound - tol)[0]
        if below.size:
            raise DataValidationError(
                f"{self.policy_name} below its bound at {[self.dates[i] for i in below[:5]]}")
        return self

    def window(self, start: Optional[str] = None, end: Optional[str] = None) -> "Dataset":
        lo = 0 if start is None else self.dates.index(start)
        hi = self.T if end is None else self.dates.index(end) + 1
        return replace(
            self,
            dates=self.dates[lo:hi],
            values=self.values[lo:hi],
            bound=self.bound[lo:hi],
            exog=self.exog[lo:hi],
        )

    def with_bound(self, bound: Any) -> "Dataset":
        return replace(self, bound=np.broadcast_to(np.asarray(bound, dtype=float), (self.T,)))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(np.column_stack([self.values, self.exog]), columns=list(self.names))
        frame.insert(0, "date", list(self.dates))
        frame["bound"] = self.bound
        return frame

    def fingerprint(self) -> str:
        from app.serialization import content_hash

        return content_hash(self.dates, self.values, self.bound, self.exog, self.names)


@dataclass(frozen=True)
class ModelSpec:
    """Which member of the model family to fit and which cells are restricted.

    A restriction is ``(equation, regressor_label)``: regressor labels are
    ``const``, ``<var>_L<j>``, exogenous names, latent slots ``<policy>*_L<j>``
    and ``kink`` for the equation's regime-kink coefficient.
    """
    variant: Variant = Variant.CKSVAR
    p: int = 1
    constrained_index: Optional[int] = None
    include_intercept: bool = True
    exog_policy: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()
    restrictions: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        if int(self.p) < 1:
            raise ValueError("lag order p must be at least 1")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "variant", Variant(self.variant))
        policy = self.exog_policy.items() if isinstance(self.exog_policy, dict) else self.exog_policy
        object.__setattr__(self, "exog_policy", tuple(sorted((str(x), tuple(eqs)) for x, eqs in policy)))
        object.__setattr__(self, "restrictions", tuple(sorted({(str(e), str(r)) for e, r in self.restrictions})))

    def with_restrictions(self, extra: Iterable[Tuple[str, str]]) -> "ModelSpec":
        return replace(self, restrictions=tuple(self.restrictions) + tuple(extra))

    def with_variant(self, variant: Variant) -> "ModelSpec":
        return replace(self, variant=Variant(variant))

    def with_p(self, p: int) -> "ModelSpec":
        return replace(self, p=p)

    def exog_equations(self, exog_name: str) -> Optional[Tuple[str, ...]]:
        for name, eqs in self.exog_policy:
            if name == exog_name:
                return eqs
        return None

    def label(self) -> str:
        tag = f"{self.variant.value}{self.p}"
        return tag + (f"r{len(self.restrictions)}" if self.restrictions else "")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant.value,
            "p": self.p,
            "constrained_index": self.constrained_index,
            "include_intercept": self.include_intercept,
            "exog_policy": {name: list(eqs) for name, eqs in self.exog_policy},
            "restrictions": [list(r) for r in self.restrictions],
        }


@dataclass(frozen=True, eq=False)
class StructuralParams:
    """Structural coefficients; the latent blocks load min(Y*_{2,t-j} - b_{t-j}, 0)."""
    beta: np.ndarray
    lam: float
    alpha: float
    gamma: np.ndarray
    B1: np.ndarray
    B12star: np.ndarray
    B2: np.ndarray
    B22star: np.ndarray
    A11inv: np.ndarray
    A22starinv: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        n = beta.size
        if gamma.size != n:
            raise ValueError("beta and gamma must have k-1 entries each")
        B1 = np.asarray(self.B1, dtype=float).reshape(n, -1)
        B2 = np.asarray(self.B2, dtype=float).reshape(-1)
        B12star = np.asarray(self.B12star, dtype=float).reshape(n, -1)
        B22star = np.asarray(self.B22star, dtype=float).reshape(-1)
        A11inv = np.asarray(self.A11inv, dtype=float).reshape(n, n)
        if B1.shape[1] != B2.size or B12star.shape[1] != B22star.size:
            raise ValueError("lag blocks of the two equations do not conform")
        if not 0.0 <= float(self.lam) <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if float(self.alpha) < 0.0:
            raise ValueError("alpha must be nonnegative")
        if abs(np.linalg.det(A11inv)) < 1e-14 or float(self.A22starinv) == 0.0:
            raise SingularityError("shock loadings must be nonsingular")
        guard = get_settings().singularity_guard
        xi = float(self.lam) * (1.0 + float(self.alpha))
        if abs(1.0 - xi * float(gamma @ beta)) < guard:
            raise SingularityError("1 - xi*gamma*beta is below the singularity guard")
        for name, arr in (("beta", beta), ("gamma", gamma), ("B1", B1), ("B2", B2),
                          ("B12star", B12star), ("B22star", B22star), ("A11inv", A11inv)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "A22starinv", float(self.A22starinv))

    @property
    def xi(self) -> float:
        return self.lam * (1.0 + self.alpha)

    @property
    def k(self) -> int:
        return self.beta.size + 1

    @property
    def p(self) -> int:
        return self.B22star.size

    @property
    def gamma_beta(self) -> float:
        return float(self.gamma @ self.beta)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta": self.beta.tolist(), "lambda": self.lam, "alpha": self.alpha, "xi": self.xi,
            "gamma": self.gamma.tolist(), "B1": self.B1.tolist(), "B12star": self.B12star.tolist(),
            "B2": self.B2.tolist(), "B22star": self.B22star.tolist(),
            "A11inv": self.A11inv.tolist(), "A22starinv": self.A22starinv,
        }


@dataclass(frozen=True, eq=False)
class ReducedFormParams:
    """Piecewise-linear reduced form. Rows are ordered (Y1..., Y2).

    ``C`` loads the observed regressors X_t, ``Cstar`` the reduced-form latent
    slots min(Ybar_{2,t-j} - b_{t-j}, 0), ``betatilde`` the regime kink and
    ``omega_chol`` is the lower Cholesky factor of var(u_t).
    """
    C: np.ndarray
    Cstar: np.ndarray
    betatilde: np.ndarray
    omega_chol: np.ndarray
    labels: Tuple[str, ...] = ()
    y2_lag_columns: Tuple[int, ...] = ()

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        k = C.shape[0]
        Cstar = np.asarray(self.Cstar, dtype=float).reshape(k, -1)
        betatilde = np.asarray(self.betatilde, dtype=float).reshape(k - 1)
        L = np.tril(np.asarray(self.omega_chol, dtype=float).reshape(k, k))
        if not np.all(np.isfinite(L)) or np.any(np.abs(np.diag(L)) < 1e-300):
            raise NonPositiveDefiniteError("Omega factor has a zero or non-finite diagonal")
        for name, arr in (("C", C), ("Cstar", Cstar), ("betatilde", betatilde), ("omega_chol", L)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "y2_lag_columns", tuple(int(c) for c in self.y2_lag_columns))

    @classmethod
    def from_omega(cls, C, Cstar, betatilde, Omega, **kwargs) -> "ReducedFormParams":
        Omega = np.asarray(Omega, dtype=float)
        Omega = 0.5 * (Omega + Omega.T)
        try:
            L = np.linalg.cholesky(Omega)
        except np.linalg.LinAlgError as exc:
            raise NonPositiveDefiniteError("Omega is not positive definite") from exc
        return cls(C=C, Cstar=Cstar, betatilde=betatilde, omega_chol=L, **kwargs)

    @property
    def k(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.Cstar.shape[1]

    @property
    def n_x(self) -> int:
        return self.C.shape[1]

    @property
    def Omega(self) -> np.ndarray:
        return self.omega_chol @ self.omega_chol.T

    @property
    def x1_columns(self) -> List[int]:
        lagged = set(self.y2_lag_columns)
        return [j for j in range(self.n_x) if j not in lagged]

    @property
    def C11(self) -> np.ndarray:
        return self.C[:-1][:, self.x1_columns]

    @property
    def C12(self) -> np.ndarray:
        return self.C[:-1][:, list(self.y2_lag_columns)]

    @property
    def C12star(self) -> np.ndarray:
        return self.Cstar[:-1]

    @property
    def C21(self) -> np.ndarray:
        return self.C[-1, self.x1_columns]

    @property
    def C22(self) -> np.ndarray:
        return self.C[-1, list(self.y2_lag_columns)]

    @property
    def C22star(self) -> np.ndarray:
        return self.Cstar[-1]

    def level_form(self) -> Tuple[np.ndarray, np.ndarray]:
        """Loadings on observed Y2 lags and on reduced-form shadow lags Ybar2_{t-j}.

        The slot parameterisation C12 Y2 + C* min(Ybar2 - b, 0) equals
        (C12 - C*) Y2 + C* Ybar2, so a pure censored model has a zero first block.
        """
        lagged = self.C[:, list(self.y2_lag_columns)]
        return lagged - self.Cstar, self.Cstar.copy()

    def replace(self, **changes) -> "ReducedFormParams":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "labels": list(self.labels),
            "C": self.C.tolist(),
            "Cstar": self.Cstar.tolist(),
            "betatilde": self.betatilde.tolist(),
            "Omega": self.Omega.tolist(),
        }


@dataclass(frozen=True, eq=False)
class RegimePath:
    D: np.ndarray
    spells: Tuple[Tuple[int, int], ...]

    @property
    def share(self) -> float:
        return float(np.mean(self.D)) if self.D.size else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"D": self.D.astype(int).tolist(), "spells": [list(s) for s in self.spells], "share": self.share}


@dataclass(frozen=True, eq=False)
class RegressorBundle:
    """Rows ``start..T-1`` of the sample in internal (Y1..., Y2) order.

    ``latent_slots[t, j-1]`` is X̄*_{t,j}: zero when the lag was off the bound,
    NaN when it is unknown (unless a latent path was supplied).
    """
    y: np.ndarray
    X: np.ndarray
    labels: Tuple[str, ...]
    bound: np.ndarray
    D: np.ndarray
    lag_D: np.ndarray
    latent_slots: np.ndarray
    y2_lag_columns: Tuple[int, ...]
    dates: Tuple[str, ...]
    start: int
    endog_names: Tuple[str, ...]
    latent_labels: Tuple[str, ...]
    presample_latent: np.ndarray

    @property
    def t_eff(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.latent_slots.shape[1]


@dataclass(frozen=True, eq=False)
class SimulatedPath:
    dataset: Dataset
    shadow: np.ndarray
    reduced_shadow: np.ndarray
    shocks: np.ndarray

    def __iter__(self):
        # unpacks as (dataset, shadow)
        return iter((self.dataset, self.shadow))
