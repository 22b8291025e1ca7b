from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.DSGE.dsge import METHOD_ALIASES
from app.errors import ConfigValidationError
from app.Model.types import Variant

COMMANDS = ("ingest", "estimate", "test", "idset", "irf", "shadow", "dsge")
SUBCOMMANDS = {
    "test": ("ih1", "ih2", "excl-long", "lag-select"),
    "dsge": ("scenario", "girf", "export"),
}


class RunConfig(BaseModel):
    """Fully resolved settings of one command; embedded in every artifact it writes."""
    command: Literal["ingest", "estimate", "test", "idset", "irf", "shadow", "dsge"]
    subcommand: Optional[str] = None
    data: Optional[Path] = None
    out: Optional[Path] = None
    seed: int = Field(default=0, ge=0)
    workers: Optional[int] = Field(default=None, ge=1)

    # ingest
    preset: Optional[Literal["us", "jp"]] = None
    recipe: Optional[Path] = None
    sources: List[Path] = []
    name: Optional[str] = None
    exog_equations: Optional[Dict[str, List[str]]] = None

    # model and fit
    variant: Variant = Variant.CKSVAR
    p: int = Field(default=1, ge=1)
    pmax: Optional[int] = Field(default=None, ge=1)
    n_starts: int = Field(default=10, ge=1)
    n_particles: int = Field(default=4096, ge=2)
    covariance: Literal["hessian", "bfgs", "none"] = "hessian"

    # tests
    long_rate: Optional[str] = None
    excluded: Optional[str] = None
    targets: List[str] = []

    # identification and responses
    xi: Optional[float] = Field(default=None, ge=0.0)
    xi_step: float = Field(default=0.005, gt=0.0, le=1.0)
    alpha: float = Field(default=0.0, ge=0.0)
    signs: Dict[str, Literal[">=0", "<=0", "free"]] = {}
    sign_horizons: Tuple[int, int] = (0, 4)
    sign_draws: int = Field(default=200, ge=1)
    shock: float = -0.25
    horizon: int = Field(default=12, ge=0)
    date: Optional[str] = None
    draws: int = Field(default=1000, ge=1)
    cumulative: bool = False
    timeline: List[int] = []
    bootstrap: int = Field(default=0, ge=0)

    # dsge
    scenario: Optional[str] = None
    method: Literal["piecewise", "occbin", "linear"] = "piecewise"

    @field_validator("method", mode="before")
    @classmethod
    def _method_alias(cls, value):
        return METHOD_ALIASES.get(value, value)

    @model_validator(mode="after")
    def _consistent(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def problems(self) -> List[str]:
        out: List[str] = []
        allowed = SUBCOMMANDS.get(self.command)
        if allowed is None and self.subcommand:
            out.append(f"{self.command} takes no subcommand")
        if allowed is not None and self.subcommand not in allowed:
            out.append(f"{self.command} needs one of {list(allowed)}, got {self.subcommand!r}")

        if self.command == "ingest":
            if (self.preset is None) == (self.recipe is None):
                out.append("ingest needs exactly one of --preset or --recipe")
            if not self.sources:
                out.append("ingest needs at least one --source file or directory")
            for path in self.sources:
                if not Path(path).exists():
                    out.append(f"source {path} does not exist")
            if self.recipe is not None and not Path(self.recipe).is_file():
                out.append(f"recipe {self.recipe} does not exist")
            if self.exog_equations is not None and self.preset != "jp":
                out.append("--exog-equations applies to the jp preset only")
        elif self.command != "dsge":
            if self.data is None:
                out.append(f"{self.command} needs --data")
            elif not Path(self.data).with_suffix(".csv").is_file():
                out.append(f"dataset {self.data} does not exist")

        if self.command == "test":
            if self.subcommand == "ih2" and self.variant != Variant.CKSVAR:
                out.append("ih2 tests CSVAR against an unrestricted CKSVAR; --variant must be cksvar")
            if self.subcommand == "ih1" and self.variant == Variant.CSVAR:
                out.append("ih1 runs on cksvar or ksvar fits")
            if self.subcommand == "lag-select" and self.pmax is None:
                out.append("lag-select needs --pmax")
        if self.pmax is not None and self.command != "test":
            out.append("--pmax applies to test lag-select only")

        upper = 1.0 + self.alpha
        if self.xi is not None and self.xi > upper:
            out.append(f"xi {self.xi} exceeds 1 + alpha = {upper}")
        if self.command == "dsge":
            if self.subcommand == "scenario" and not self.scenario:
                out.append("dsge scenario needs a scenario name")
            if self.subcommand in ("girf", "export") and self.xi is None:
                out.append(f"dsge {self.subcommand} needs --xi")
        if self.bootstrap and self.xi is None:
            out.append("--bootstrap bands are computed at a single --xi")
        lo, hi = self.sign_horizons
        if not 0 <= lo <= hi:
            out.append(f"sign horizons {self.sign_horizons} must satisfy 0 <= lo <= hi")
        if any(h < 0 or h > self.horizon for h in self.timeline):
            out.append(f"timeline horizons {self.timeline} must lie in 0..{self.horizon}")
        return out

    @classmethod
    def resolve(cls, **values: Any) -> "RunConfig":
        """Validate, reporting every field and consistency problem at once."""
        try:
            return cls.model_validate({k: v for k, v in values.items() if v is not None})
        except ValidationError as exc:
            problems = []
            for err in exc.errors():
                where = ".".join(str(p) for p in err["loc"])
                message = err["msg"].removeprefix("Value error, ")
                problems.extend(message.split("; ") if not where else [f"{where}: {message}"])
            raise ConfigValidationError(problems) from exc

    @property
    def command_name(self) -> str:
        return f"{self.command}-{self.subcommand}" if self.subcommand else self.command

    @property
    def dataset_name(self) -> str:
        if self.command == "dsge":
            return self.scenario or "calibration"
        if self.command == "ingest":
            return self.name or self.preset or Path(self.recipe).stem
        return Path(self.data).stem

    def spec_label(self) -> str:
        if self.command == "dsge":
            return self.method if self.xi is None else f"{self.method}-xi{self.xi:g}"
        if self.command == "ingest":
            return "data"
        if self.subcommand == "lag-select":
            return f"{self.variant.value}pmax{self.pmax}"
        return f"{self.variant.value}{self.p}"


class EstimateRequest(BaseModel):
    dataset: str
    variant: Variant = Variant.CKSVAR
    p: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    n_starts: int = Field(default=10, ge=1)
    n_particles: int = Field(default=4096, ge=2)


class TestRequest(EstimateRequest):
    __test__ = False

    test: Literal["ih1", "ih2", "excl-long", "lag-select"]
    pmax: Optional[int] = Field(default=None, ge=1)
    long_rate: Optional[str] = None
    excluded: Optional[str] = None
    targets: List[str] = []


class IdentifiedSetRequest(EstimateRequest):
    xi_step: float = Field(default=0.005, gt=0.0, le=1.0)
    alpha: float = Field(default=0.0, ge=0.0)
    signs: Dict[str, Literal[">=0", "<=0", "free"]] = {}
    sign_horizons: Tuple[int, int] = (0, 4)
    sign_draws: int = Field(default=200, ge=1)


class ScenarioRequest(BaseModel):
    scenario: str
    xi: Optional[float] = Field(default=None, ge=0.0)
    alpha: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0)
