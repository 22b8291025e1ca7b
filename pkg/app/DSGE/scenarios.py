import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, Field, field_validator, model_validator

from app.config import SCENARIO_DIR, get_settings
from app.DSGE.dsge import (
    METHOD_ALIASES,
    DSGEParams,
    ModelState,
    demand_shock_for_spell,
    dsge_girf,
    elb_deviation,
    elb_initial_state,
    simulate_path,
)
from app.errors import ConfigValidationError

logger = logging.getLogger(__name__)

CALIBRATION_PREFIX = "CAL_"
SCENARIO_ALIASES = {"figure1": "demand_shock_paths", "figure2": "policy_shock_at_elb"}


def _split(value: Any) -> Any:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


class Scenario(BaseModel):
    name: str
    description: str = ""
    scenario_kind: Literal["paths", "girf"] = "paths"
    methods: List[Literal["piecewise", "occbin"]] = ["piecewise"]
    xi_grid: List[float] = [0.0, 0.5, 1.0]
    alpha: float = Field(0.0, ge=0.0)
    periods: int = Field(20, ge=2)
    demand_shock: Optional[float] = None
    demand_shock_periods: List[int] = [1]
    min_spell: int = Field(4, ge=1)
    severity: float = Field(1.0, gt=0.0)
    policy_shock: float = -0.25
    horizon: int = Field(12, ge=1)
    include_no_elb: bool = True
    steady_state_rate: float = Field(0.01, ge=0.0)
    calibration: Dict[str, float] = {}

    @field_validator("methods", "xi_grid", "demand_shock_periods", mode="before")
    @classmethod
    def _comma_lists(cls, value):
        return _split(value)

    @field_validator("methods", mode="before")
    @classmethod
    def _method_aliases(cls, value):
        return [METHOD_ALIASES.get(m, m) for m in _split(value)]

    @field_validator("demand_shock", mode="before")
    @classmethod
    def _auto_shock(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("", "auto"):
            return None
        return value

    @model_validator(mode="after")
    def _check(self):
        problems = []
        for xi in self.xi_grid:
            if not 0.0 <= xi <= 1.0 + self.alpha:
                problems.append(f"xi {xi} is outside [0, 1 + alpha]")
        if self.scenario_kind == "paths":
            bad = [t for t in self.demand_shock_periods if not 1 <= t <= self.periods]
            if bad:
                problems.append(f"demand shock periods {bad} fall outside 1..{self.periods}")
        unknown = set(self.calibration) - set(DSGEParams.__dataclass_fields__)
        if unknown:
            problems.append(f"unknown calibration keys {sorted(unknown)}")
        reserved = {"alpha", "lambda_star"} & set(self.calibration)
        if reserved:
            problems.append(f"set UMP strength through XI_GRID and ALPHA, not {sorted(reserved)}")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def params(self, xi: float) -> DSGEParams:
        """Baseline calibration with this scenario's overrides and UMP strength ``xi``."""
        values = {"b": elb_deviation(self.steady_state_rate), **self.calibration}
        return DSGEParams.baseline(**values, alpha=self.alpha, lambda_star=xi / (1.0 + self.alpha))


def scenario_path(name_or_path: Union[str, Path]) -> Path:
    """File behind a bundled scenario name, its alias, or an explicit path."""
    path = Path(name_or_path)
    if path.suffix:
        return path
    name = SCENARIO_ALIASES.get(str(name_or_path), str(name_or_path))
    return SCENARIO_DIR / f"{name}.env"


def load_scenario(name_or_path: Union[str, Path]) -> Scenario:
    """Read a bundled scenario by name or alias, or a key-value file by path."""
    path = scenario_path(name_or_path)
    if not path.is_file():
        bundled = sorted(p.stem for p in SCENARIO_DIR.glob("*.env"))
        raise ConfigValidationError([f"scenario {name_or_path!r} not found; bundled: {bundled} (aliases {sorted(SCENARIO_ALIASES)})"])
    raw = dotenv_values(path)
    fields: Dict[str, Any] = {"name": path.stem}
    calibration: Dict[str, str] = {}
    for key, value in raw.items():
        if value is None:
            continue
        if key.startswith(CALIBRATION_PREFIX):
            calibration[key[len(CALIBRATION_PREFIX):].lower()] = value
        else:
            fields[key.lower()] = value
    fields["calibration"] = calibration
    try:
        return Scenario.model_validate(fields)
    except ValueError as exc:
        raise ConfigValidationError([str(exc)]) from exc


@dataclass
class ScenarioResult:
    scenario: Scenario
    frame: pd.DataFrame
    demand_shock: float
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario.model_dump(),
            "demand_shock": self.demand_shock,
            "meta": self.meta,
            "frame": self.frame.to_dict(orient="list"),
        }


def _paths_case(scenario: Scenario, xi: float, method: str, eps: np.ndarray) -> pd.DataFrame:
    params = scenario.params(xi)
    frame = simulate_path(params, eps, method=method).to_frame()
    frame.insert(0, "case", f"xi={xi:g}")
    frame.insert(1, "xi", xi)
    frame.insert(2, "method", method)
    return frame


def _girf_case(scenario: Scenario, xi: float, method: str, demand_shock: float) -> pd.DataFrame:
    params = scenario.params(xi)
    init = elb_initial_state(params, demand_shock)
    frame = dsge_girf(params, method, init=init, shock=scenario.policy_shock, horizon=scenario.horizon)
    frame.insert(0, "case", f"xi={xi:g}")
    frame.insert(1, "xi", xi)
    frame.insert(2, "method", method)
    return frame


def run_scenario(scenario: Scenario, overrides: Optional[Mapping[str, Any]] = None,
                 workers: Optional[int] = None) -> ScenarioResult:
    if overrides:
        try:
            scenario = Scenario.model_validate({**scenario.model_dump(), **dict(overrides)})
        except ValueError as exc:
            raise ConfigValidationError([str(exc)]) from exc
    sizing_method = scenario.methods[0] if scenario.scenario_kind == "paths" else "occbin"
    rows = [t - 1 for t in scenario.demand_shock_periods] if scenario.scenario_kind == "paths" else [0]
    demand_shock = scenario.demand_shock
    if demand_shock is None:
        demand_shock = scenario.severity * demand_shock_for_spell(
            scenario.params(0.0), scenario.min_spell, rows, method=sizing_method)
    logger.info("scenario %s: %s, demand shock %.6g", scenario.name, scenario.scenario_kind, demand_shock)

    cases = [(xi, m) for m in scenario.methods for xi in scenario.xi_grid]
    with ThreadPoolExecutor(max_workers=workers or get_settings().workers) as pool:
        if scenario.scenario_kind == "paths":
            eps = np.zeros((scenario.periods, 3))
            eps[rows, 2] = demand_shock
            futures = [pool.submit(_paths_case, scenario, xi, m, eps) for xi, m in cases]
        else:
            futures = [pool.submit(_girf_case, scenario, xi, m, demand_shock) for xi, m in cases]
        frames = [f.result() for f in futures]

    if scenario.include_no_elb:
        params = scenario.params(1.0)
        if scenario.scenario_kind == "paths":
            extra = simulate_path(params, eps, method="linear").to_frame()
        else:
            extra = dsge_girf(params, "linear", init=ModelState(), shock=scenario.policy_shock,
                              horizon=scenario.horizon)
        extra.insert(0, "case", "no ELB")
        extra.insert(1, "xi", np.nan)
        extra.insert(2, "method", "linear")
        frames.append(extra)

    frame = pd.concat(frames, ignore_index=True)
    meta = {"bound": scenario.params(0.0).b, "calibration": scenario.params(1.0).to_dict()}
    return ScenarioResult(scenario=scenario, frame=frame, demand_shock=float(demand_shock), meta=meta)
