# raw CSV series -> estimation-ready Dataset

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from app.config import get_settings
from app.errors import DataValidationError
from app.Model.types import Dataset
from app.serialization import FLOAT_FORMAT, dumps, file_hash

logger = logging.getLogger(__name__)

_QUARTER = re.compile(r"^(\d{4})-?[Qq]([1-4])$")
_MONTH = re.compile(r"^(\d{4})-(\d{2})$")
ANNUALIZE = {"Q": 400.0, "M": 1200.0}


class Frequency(str, Enum):
    MONTHLY = "M"
    QUARTERLY = "Q"


class TransformKind(str, Enum):
    LEVEL = "level"
    LOG_DIFF_ANNUALIZED = "log_diff_annualized"
    PCT_DIFF_ANNUALIZED = "pct_diff_annualized"
    GAP_PERCENT = "gap_percent"


@dataclass(frozen=True, eq=False)
class RawSeries:
    name: str
    frequency: Frequency
    dates: pd.PeriodIndex
    values: np.ndarray
    units: str = ""
    source: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        dates = pd.PeriodIndex(self.dates)
        freq = Frequency(self.frequency)
        if len(dates) != values.size:
            raise DataValidationError(f"{self.name}: {len(dates)} dates for {values.size} values")
        if len(dates) and dates.freqstr[0] != freq.value:
            raise DataValidationError(f"{self.name}: dates are {dates.freqstr}, not {freq.value}")
        if len(dates) > 1 and not np.all(np.diff(dates.asi8) > 0):
            raise DataValidationError(f"{self.name}: dates are not strictly increasing")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "frequency", freq)

    def to_series(self) -> pd.Series:
        return pd.Series(self.values, index=self.dates, name=self.name)

    @classmethod
    def from_series(cls, series: pd.Series, name: str, units: str = "", source: str = "") -> "RawSeries":
        index = pd.PeriodIndex(series.index)
        return cls(name=name, frequency=Frequency(index.freqstr[0]), dates=index,
                   values=series.to_numpy(dtype=float), units=units, source=source)


def _parse_dates(labels: Sequence[str]) -> Tuple[pd.PeriodIndex, Frequency]:
    labels = [str(s).strip() for s in labels]
    if labels and all(_QUARTER.match(s) for s in labels):
        periods = [pd.Period(year=int(m.group(1)), quarter=int(m.group(2)), freq="Q")
                   for m in map(_QUARTER.match, labels)]
        return pd.PeriodIndex(periods), Frequency.QUARTERLY
    if labels and all(_MONTH.match(s) for s in labels):
        return pd.PeriodIndex([pd.Period(s, freq="M") for s in labels]), Frequency.MONTHLY
    stamps = pd.to_datetime(pd.Series(labels), errors="coerce")
    if stamps.isna().any():
        bad = [labels[i] for i in np.where(stamps.isna())[0][:5]]
        raise DataValidationError(f"unparseable dates {bad}")
    months = pd.PeriodIndex(stamps.dt.to_period("M"))
    steps = np.diff(months.asi8)
    if steps.size and np.all(steps % 3 == 0) and np.all(months.month % 3 == months.month[0] % 3):
        return pd.PeriodIndex(stamps.dt.to_period("Q")), Frequency.QUARTERLY
    return months, Frequency.MONTHLY


def read_csv_series(path: Union[str, Path], units: str = "") -> Dict[str, RawSeries]:
    """Read a wide (date, col1, col2, ...) or long (date, series, value) CSV file."""
    path = Path(path)
    frame = pd.read_csv(path)
    if frame.shape[1] < 2:
        raise DataValidationError(f"{path.name}: need a date column and at least one value column")
    lower = {c.lower(): c for c in frame.columns}
    date_col = lower.get("date", frame.columns[0])
    source = file_hash(path)
    if {"series", "value"} <= set(lower):
        long = frame.rename(columns={lower["series"]: "series", lower["value"]: "value", date_col: "date"})
        pieces = {name: grp.set_index("date")["value"] for name, grp in long.groupby("series", sort=True)}
    else:
        indexed = frame.set_index(date_col)
        pieces = {str(c): indexed[c] for c in indexed.columns}

    out = {}
    for name, column in pieces.items():
        column = pd.to_numeric(column, errors="coerce")
        present = np.where(column.notna().to_numpy())[0]
        if not present.size:
            logger.warning("%s: column %s has no values", path.name, name)
            continue
        # leading and trailing gaps are coverage, interior gaps stay NaN
        column = column.iloc[present[0]: present[-1] + 1]
        dates, freq = _parse_dates(list(column.index))
        values = column.to_numpy(dtype=float)
        out[name] = RawSeries(name=name, frequency=freq, dates=dates, values=values, units=units, source=source)
    logger.info("read %d series from %s", len(out), path.name)
    return out


class SeriesLoader:
    """Collects series from CSV files, keeping file-level load statistics."""

    def __init__(self):
        self.reset_stats()

    def load_csvs(self, csv_dir: Union[str, Path], recursive: bool = True) -> Dict[str, RawSeries]:
        dir_path = Path(csv_dir)
        if not dir_path.is_dir():
            raise DataValidationError(f"data directory {dir_path} does not exist")
        pattern = "**/*.csv" if recursive else "*.csv"
        files = sorted(dir_path.glob(pattern))
        self.stats["total_files"] += len(files)
        return self.load_files(files, counted=True)

    def load_files(self, paths: Sequence[Union[str, Path]], counted: bool = False) -> Dict[str, RawSeries]:
        if not counted:
            self.stats["total_files"] += len(paths)
        raws: Dict[str, RawSeries] = {}
        for path in paths:
            try:
                series = read_csv_series(path)
            except DataValidationError:
                self.stats["failed"] += 1
                raise
            clash = set(series) & set(raws)
            if clash:
                raise DataValidationError(f"series {sorted(clash)} defined in more than one file")
            raws.update(series)
            self.stats["successful"] += 1
            self.stats["total_series"] += len(series)
        return raws

    def get_stats(self) -> Dict[str, int]:
        return self.stats.copy()

    def reset_stats(self):
        self.stats = {"total_files": 0, "successful": 0, "failed": 0, "total_series": 0}


def monthly_to_quarterly_mean(s: RawSeries) -> RawSeries:
    if s.frequency != Frequency.MONTHLY:
        raise DataValidationError(f"{s.name} is not monthly")
    series = s.to_series()
    quarters = series.index.asfreq("Q")
    grouped = series.groupby(quarters)
    counts = grouped.size()
    means = grouped.apply(lambda g: g.mean(skipna=False))
    complete = counts[counts == 3].index
    partial = counts[counts != 3].index
    if len(partial):
        logger.warning("%s: dropped partial quarters %s", s.name, [str(q) for q in partial])
    result = means.loc[complete]
    if result.empty:
        raise DataValidationError(f"{s.name}: no complete quarter")
    return RawSeries.from_series(result, s.name, s.units, s.source)


def transform(s: RawSeries, kind: Union[str, TransformKind], other: Optional[RawSeries] = None) -> RawSeries:
    kind = TransformKind(kind)
    series = s.to_series()
    scale = ANNUALIZE[s.frequency.value]
    if kind == TransformKind.LEVEL:
        return s
    if kind == TransformKind.GAP_PERCENT:
        if other is None:
            raise DataValidationError("gap_percent needs the potential series")
        if other.frequency != s.frequency:
            raise DataValidationError(f"{s.name} and {other.name} have different frequencies")
        potential = other.to_series()
        common = series.index.intersection(potential.index)
        result = 100.0 * (series[common] - potential[common]) / potential[common]
    elif kind == TransformKind.LOG_DIFF_ANNUALIZED:
        if np.any(series.dropna() <= 0.0):
            raise DataValidationError(f"{s.name} has nonpositive levels; log transform undefined")
        result = scale * np.log(series).diff().iloc[1:]
    else:
        result = scale * series.pct_change(fill_method=None).iloc[1:]
    return RawSeries.from_series(result, s.name, s.units, s.source)


class VariableRecipe(BaseModel):
    name: str
    source: str
    transform: TransformKind = TransformKind.LEVEL
    other: Optional[str] = None
    role: Optional[str] = None
    units: str = ""

    @model_validator(mode="after")
    def _gap_needs_other(self):
        if self.transform == TransformKind.GAP_PERCENT and not self.other:
            raise ValueError(f"{self.name}: gap_percent requires 'other' (the potential series)")
        return self


class BoundRecipe(BaseModel):
    kind: Literal["constant", "series"] = "constant"
    value: float = 0.0
    source: Optional[str] = None
    offset: float = 0.0
    censor: bool = True

    @model_validator(mode="after")
    def _series_needs_source(self):
        if self.kind == "series" and not self.source:
            raise ValueError("a series bound needs a source column")
        return self

    def describe(self) -> str:
        if self.kind == "constant":
            return f"constant {self.value:g}"
        return f"{self.source} + {self.offset:g}"


class IngestConfig(BaseModel):
    preset: Literal["us", "jp", "custom"] = "custom"
    variables: List[VariableRecipe] = []
    constrained: str = ""
    bound: BoundRecipe = Field(default_factory=BoundRecipe)
    exog: List[VariableRecipe] = []
    exog_equations: Optional[Dict[str, List[str]]] = None
    window: Optional[Tuple[str, str]] = None

    @model_validator(mode="after")
    def _check_names(self):
        names = [v.name for v in self.variables]
        every = names + [x.name for x in self.exog]
        if len(set(every)) != len(every):
            raise ValueError(f"output names must be unique, got {every}")
        if self.variables and self.constrained not in names:
            raise ValueError(f"constrained variable {self.constrained!r} is not among {names}")
        for exog_name, eqs in (self.exog_equations or {}).items():
            if exog_name not in [x.name for x in self.exog]:
                raise ValueError(f"exog_equations names unknown control {exog_name!r}")
            unknown = set(eqs) - set(names)
            if unknown:
                raise ValueError(f"exog_equations for {exog_name} name unknown equations {sorted(unknown)}")
        return self


def _quarter(label: str) -> pd.Period:
    index, freq = _parse_dates([label])
    return index[0] if freq == Frequency.QUARTERLY else index[0].asfreq("Q")


def _quarterly(raw: RawSeries) -> RawSeries:
    return monthly_to_quarterly_mean(raw) if raw.frequency == Frequency.MONTHLY else raw


def _lookup(raws: Mapping[str, RawSeries], name: str, missing: List[str]) -> Optional[RawSeries]:
    if name not in raws:
        missing.append(name)
        return None
    return _quarterly(raws[name])


def _build_recipe(recipe: VariableRecipe, raws: Mapping[str, RawSeries], missing: List[str]) -> Optional[pd.Series]:
    base = _lookup(raws, recipe.source, missing)
    other = _lookup(raws, recipe.other, missing) if recipe.other else None
    if base is None or (recipe.other and other is None):
        return None
    return transform(base, recipe.transform, other).to_series().rename(recipe.name)


def build_bound(config: IngestConfig, dates: pd.PeriodIndex, raws: Mapping[str, RawSeries]) -> np.ndarray:
    rec = config.bound
    if rec.kind == "constant":
        return np.full(len(dates), float(rec.value))
    if rec.source not in raws:
        raise DataValidationError(f"bound source {rec.source!r} not found")
    series = _quarterly(raws[rec.source]).to_series().reindex(dates)
    if series.isna().any():
        gaps = [str(d) for d in series.index[series.isna()][:5]]
        raise DataValidationError(f"bound source {rec.source} does not cover {gaps}")
    return series.to_numpy(dtype=float) + rec.offset


def assemble(config: IngestConfig, raws: Mapping[str, RawSeries]) -> Dataset:
    if not config.variables:
        raise DataValidationError("no variable recipes given")
    missing: List[str] = []
    columns = [_build_recipe(r, raws, missing) for r in config.variables]
    exog_cols = [_build_recipe(r, raws, missing) for r in config.exog]
    if missing:
        raise DataValidationError(f"recipes reference missing series {sorted(set(missing))}")

    every = columns + exog_cols
    start = max(c.index.min() for c in every)
    end = min(c.index.max() for c in every)
    if config.window:
        w0, w1 = (_quarter(w) for w in config.window)
        if w0 < start or w1 > end:
            raise DataValidationError(f"window {config.window} exceeds common coverage {start}..{end}")
        start, end = w0, w1
    if start > end:
        raise DataValidationError("series have no common window")
    dates = pd.period_range(start, end, freq="Q")
    frame = pd.concat([c.reindex(dates) for c in every], axis=1)
    if frame.isna().any().any():
        bad = frame.index[frame.isna().any(axis=1)]
        raise DataValidationError(f"missing values inside the window at {[str(d) for d in bad[:5]]}")

    names = [r.name for r in config.variables]
    ci = names.index(config.constrained)
    values = frame[names].to_numpy(dtype=float)
    bound = build_bound(config, dates, raws)
    below = values[:, ci] < bound
    if below.any():
        if not config.bound.censor:
            raise DataValidationError(f"{config.constrained} below its bound in {int(below.sum())} periods")
        logger.info("%s: %d observations below the bound set to the bound", config.constrained, int(below.sum()))
        values[below, ci] = bound[below]
    tol = get_settings().bound_tol
    elb_share = float(np.mean(values[:, ci] <= bound + tol))

    sources = sorted({r.source for r in config.variables + config.exog}
                     | {r.other for r in config.variables + config.exog if r.other}
                     | ({config.bound.source} if config.bound.source else set()))
    manifest = {
        "config": config.model_dump(mode="json"),
        "sources": {name: raws[name].source for name in sources},
        "window": [str(dates[0]), str(dates[-1])],
        "bound": config.bound.describe(),
        "censored": int(below.sum()),
        "elb_share": elb_share,
        "exog_equations": config.exog_equations or {},
    }
    logger.info("assembled %d quarters %s..%s, ELB share %.2f", len(dates), dates[0], dates[-1], elb_share)
    return Dataset(
        dates=tuple(str(d) for d in dates),
        values=values,
        bound=bound,
        exog=frame[[r.name for r in config.exog]].to_numpy(dtype=float) if config.exog else None,
        names=tuple(names) + tuple(r.name for r in config.exog),
        constrained_index=ci,
        roles={r.role: r.name for r in config.variables if r.role},
        manifest=manifest,
    )


def config_from_manifest(manifest: Mapping[str, Any]) -> IngestConfig:
    return IngestConfig.model_validate(manifest["config"])


def us_preset() -> IngestConfig:
    return IngestConfig(
        preset="us",
        variables=[
            VariableRecipe(name="inflation", source="GDPDEF", transform="log_diff_annualized", role="inflation"),
            VariableRecipe(name="output_gap", source="GDPC1", other="GDPPOT", transform="gap_percent",
                           role="output_gap"),
            VariableRecipe(name="long_rate", source="GS10", role="long_rate"),
            VariableRecipe(name="ffr", source="FEDFUNDS", role="policy_rate"),
        ],
        constrained="ffr",
        bound=BoundRecipe(kind="constant", value=0.2),
        window=("1960Q1", "2019Q1"),
    )


def jp_preset(exog_equations: Optional[Dict[str, List[str]]] = None) -> IngestConfig:
    return IngestConfig(
        preset="jp",
        variables=[
            VariableRecipe(name="inflation", source="CPI_CORE", transform="pct_diff_annualized", role="inflation"),
            VariableRecipe(name="output_gap", source="GAP_BOJ", role="output_gap"),
            VariableRecipe(name="long_rate", source="JGB9", role="long_rate"),
            VariableRecipe(name="call_rate", source="CALL", role="policy_rate"),
        ],
        constrained="call_rate",
        bound=BoundRecipe(kind="series", source="IOR", offset=0.07),
        exog=[VariableRecipe(name="trend_growth", source="POTGDP", transform="pct_diff_annualized")],
        exog_equations=exog_equations,
        window=("1985Q3", "2019Q1"),
    )


PRESETS = {"us": us_preset, "jp": jp_preset}


def write_dataset(dataset: Dataset, out_dir: Union[str, Path], stem: str) -> Dict[str, str]:
    """Write ``<stem>.csv`` (date, variables, controls, bound) and ``<stem>.json`` (manifest)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    dataset.to_frame().to_csv(csv_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    header = {
        "names": list(dataset.names),
        "k": dataset.k,
        "constrained": dataset.policy_name,
        "roles": dataset.roles,
        "manifest": dataset.manifest,
    }
    json_path.write_text(dumps(header))
    logger.info("wrote dataset %s (%d x %d)", csv_path, dataset.T, dataset.k)
    return {"csv": str(csv_path), "json": str(json_path)}


def read_dataset(path: Union[str, Path], constrained: Optional[str] = None) -> Dataset:
    """Load a dataset written by ``write_dataset``; a bare CSV needs a ``bound`` column."""
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    json_path = path.with_suffix(".json")
    frame = pd.read_csv(csv_path, dtype={"date": str})
    if "bound" not in frame.columns:
        raise DataValidationError(f"{csv_path.name} has no bound column")
    if json_path.is_file():
        header = json.loads(json_path.read_text())
        names, k = header["names"], header["k"]
        constrained = constrained or header["constrained"]
        roles, manifest = header.get("roles", {}), header.get("manifest", {})
    else:
        names = [c for c in frame.columns if c not in ("date", "bound")]
        k = len(names)
        constrained = constrained or names[-1]
        roles, manifest = {}, {"source": csv_path.name}
    endog = names[:k]
    if constrained not in endog:
        raise DataValidationError(f"constrained variable {constrained!r} is not among {endog}")
    exog = frame[names[k:]].to_numpy(dtype=float) if len(names) > k else None
    return Dataset(
        dates=tuple(frame["date"].astype(str)),
        values=frame[endog].to_numpy(dtype=float),
        bound=frame["bound"].to_numpy(dtype=float),
        exog=exog,
        names=tuple(names),
        constrained_index=endog.index(constrained),
        roles=roles,
        manifest=manifest,
    )


def exog_policy(dataset: Dataset) -> Dict[str, Tuple[str, ...]]:
    """Equation restrictions for exogenous controls recorded at assembly."""
    return {name: tuple(eqs) for name, eqs in dataset.manifest.get("exog_equations", {}).items()}
