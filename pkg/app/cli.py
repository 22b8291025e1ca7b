"""Command-line front end: ``elb-cksvar <command> [subcommand] [flags]``.

Every command writes ``<command>_<dataset>_<spec>_<seed>.{json,csv,txt}`` to
``--out`` (default ``CKSVAR_OUTPUT_DIR``). The JSON embeds the resolved
configuration and the content hashes of the inputs. The exit status is 0 when
every computation converged, 1 when one did not and 2 on any error.
"""
import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from app.config import configure_logging, get_settings
from app.DSGE.dsge import DSGEParams, dsge_girf, export_as_cksvar
from app.DSGE.scenarios import load_scenario, run_scenario, scenario_path
from app.errors import CKSVARError, ConfigValidationError, ConvergenceError, EmptyIdentifiedSetError
from app.Estimation.estimation import EstimationResult, FitOptions, fit
from app.Estimation.hypothesis_tests import (
    format_lag_table,
    format_test_table,
    select_lag,
    test_exclusion,
    test_ih1,
    test_ih2,
)
from app.Identification.identification import (
    IdentifiedSet,
    SignRestrictionSpec,
    apply_sign_restrictions,
    shadow_rate_envelope,
    shadow_rate_path,
    solve_identified_set,
    xi_grid,
)
from app.Identification.irf import IRFRequest, bootstrap_girf_bands, girf, girf_envelope, irf_timeline
from app.Loaders.data_ingest import PRESETS, IngestConfig, SeriesLoader, assemble, exog_policy, read_dataset, write_dataset
from app.Model.types import Dataset, ModelSpec
from app.models import SUBCOMMANDS, RunConfig
from app.serialization import FLOAT_FORMAT, file_hash, safe_stem, write_artifacts

logger = logging.getLogger(__name__)

ProgressFn = Callable[[str, float], None]


@dataclass
class CommandOutput:
    payload: Dict[str, Any]
    frame: Optional[pd.DataFrame] = None
    text: Optional[str] = None
    converged: bool = True
    extra: Dict[str, pd.DataFrame] = field(default_factory=dict)


def _noop(step: str, percentage: float) -> None:
    pass


def load_data(cfg: RunConfig) -> Dataset:
    return read_dataset(cfg.data)


def model_spec(cfg: RunConfig, data: Dataset) -> ModelSpec:
    return ModelSpec(variant=cfg.variant, p=cfg.p, exog_policy=exog_policy(data))


def fit_options(cfg: RunConfig) -> FitOptions:
    return FitOptions(n_starts=cfg.n_starts, seed=cfg.seed, n_particles=cfg.n_particles,
                      covariance=cfg.covariance, workers=cfg.workers)


def expand_sources(sources: Sequence[Path]) -> List[Path]:
    """Source files, with directories replaced by the CSV files they hold."""
    out: List[Path] = []
    for source in map(Path, sources):
        out.extend(sorted(source.glob("*.csv")) if source.is_dir() else [source])
    return out


def input_hashes(cfg: RunConfig) -> Dict[str, str]:
    paths: List[Path] = []
    if cfg.data is not None:
        paths += [Path(cfg.data).with_suffix(".csv"), Path(cfg.data).with_suffix(".json")]
    paths += expand_sources(cfg.sources)
    if cfg.recipe is not None:
        paths.append(Path(cfg.recipe))
    if cfg.scenario:
        paths.append(scenario_path(cfg.scenario))
    return {p.name: file_hash(p) for p in paths if p.is_file()}


def cmd_ingest(cfg: RunConfig, progress: ProgressFn = _noop) -> CommandOutput:
    if cfg.recipe is not None:
        config = IngestConfig.model_validate_json(Path(cfg.recipe).read_text())
    elif cfg.preset == "jp":
        config = PRESETS["jp"](exog_equations=cfg.exog_equations)
    else:
        config = PRESETS[cfg.preset]()
    loader = SeriesLoader()
    raws = loader.load_files(expand_sources(cfg.sources))
    progress("assembling dataset", 50.0)
    dataset = assemble(config, raws)
    written = write_dataset(dataset, cfg.out or get_settings().data_dir, cfg.dataset_name)
    summary = (f"{dataset.T} quarters {dataset.dates[0]}..{dataset.dates[-1]}, "
               f"variables {list(dataset.endog_names)}, ELB share {dataset.manifest['elb_share']:.3f}")
    payload = {"dataset": written, "loader": loader.get_stats(), "manifest": dataset.manifest}
    return CommandOutput(payload=payload, frame=dataset.to_frame(), text=summary)


def cmd_estimate(cfg: RunConfig, progress: ProgressFn = _noop) -> CommandOutput:
    data = load_data(cfg)
    result = fit(model_spec(cfg, data), data, fit_options(cfg))
    table = result.parameter_table()
    head = f"{result.spec.label()}  loglik={result.loglik:.3f}  npar={result.npar}  AIC/T={result.aic_per_obs:.4f}"
    text = head + "\n" + table.to_string(index=False, float_format=lambda v: f"{v:.4f}")
    extra = {"latent": result.latent.to_frame()} if result.latent is not None else {}
    return CommandOutput(payload=result.to_dict(), frame=table, text=text, converged=result.converged, extra=extra)


def cmd_test(cfg: RunConfig, progress: ProgressFn = _noop) -> CommandOutput:
    data = load_data(cfg)
    base, options = model_spec(cfg, data), fit_options(cfg)
    if cfg.subcommand == "lag-select":
        selection = select_lag(data, cfg.pmax, cfg.variant, options, base=base)
        converged = all(f.converged for f in selection.fits.values())
        return CommandOutput(payload=selection.to_dict(), frame=selection.to_frame(),
                             text=format_lag_table(selection), converged=converged)
    if cfg.subcommand == "ih1":
        result = test_ih1(data, cfg.p, cfg.variant, cfg.long_rate, options, base=base)
    elif cfg.subcommand == "ih2":
        result = test_ih2(data, cfg.p, options, base=base)
    else:
        excluded = cfg.excluded or cfg.long_rate or data.roles.get("long_rate")
        if excluded is None:
            raise ConfigValidationError(["excl-long needs --excluded or a dataset with a long_rate role"])
        result = test_exclusion(data, cfg.p, cfg.variant, excluded, cfg.targets or None, options, base=base)
    return CommandOutput(payload=result.to_dict(), frame=pd.DataFrame([result.to_row()]),
                         text=format_test_table([result]), converged=result.converged)


def _identified(cfg: RunConfig, est: EstimationResult, data: Dataset,
                grid: Optional[Sequence[float]] = None) -> IdentifiedSet:
    bounds = (0.0, 1.0 + cfg.alpha)
    if grid is None:
        grid = xi_grid(step=cfg.xi_step, lo=bounds[0], hi=bounds[1])
    identified = solve_identified_set(est.params, grid=grid, bounds=bounds, workers=cfg.workers)
    if cfg.signs:
        srs = SignRestrictionSpec(signs=cfg.signs, horizons=cfg.sign_horizons, shock=cfg.shock,
                                  draws=cfg.sign_draws, seed=cfg.seed)
        identified = apply_sign_restrictions(identified, est, data, srs, workers=cfg.workers)
    return identified


def cmd_idset(cfg: RunConfig, progress: ProgressFn = _noop) -> CommandOutput:
    data = load_data(cfg)
    est = fit(model_spec(cfg, data), data, fit_options(cfg))
    progress("solving identified set", 60.0)
    identified = _identified(cfg, est, data)
    lines = [f"{est.spec.label()}  loglik={est.loglik:.3f}",
             f"xi projection: {identified.xi_projection()}",
             f"xi intervals: {identified.xi_intervals()}"]
    lines += identified.notes
    payload = {"estimation": est.to_dict(), "identified_set": identified.to_dict()}
    return CommandOutput(payload=payload, frame=identified.to_frame(), text="\n".join(lines),
                         converged=est.converged)


def cmd_irf(cfg: RunConfig, progress: ProgressFn = _noop) -> CommandOutput:
    data = load_data(cfg)
    est = fit(model_spec(cfg, data), data, fit_options(cfg))
    progress("solving identified set", 40.0)
    grid = None if cfg.xi is None else [cfg.xi]
    identified = _identified(cfg, est, data, grid)
    req = IRFRequest(shock=cfg.shock, horizon=cfg.horizon, date=cfg.date, draws=cfg.draws, seed=cfg.seed,
                     cumulative=cfg.cumulative)
    progress("simulating responses", 60.0)
    if cfg.xi is not None:
        accepted = identified.accepted()
        if not accepted:
            raise EmptyIdentifiedSetError(f"xi={cfg.xi:g} is not in the identified set")
        point = accepted[0]
        if cfg.bootstrap:
            result = bootstrap_girf_bands(point, est, data, req, n_boot=cfg.bootstrap, options=fit_options(cfg))
        else:
            result = girf(point, est, data, est.latent, req)
    else:
        result = girf_envelope(identified, est, data, est.latent, req, workers=cfg.workers)
    extra = {}
    if cfg.timeline:
        extra["timeline"] = irf_timeline(identified, est, data, est.latent, horizons=cfg.timeline, req=req,
                                         workers=cfg.workers)
    frame = result.to_frame()
    text = frame.pivot_table(index="horizon", columns="variable", values=["lo", "hi"]).to_string(
        float_format=lambda v: f"{v:.4f}")
    payload = {"estimation": est.to_dict(), "xi_projection": identified.xi_projection(), "irf": result.to_dict()}
    return CommandOutput(payload=payload, frame=frame, text=text, converged=est.converged, extra=extra)


def cmd_shadow(cfg: RunConfig, progress: ProgressFn = _noop) -> CommandOutput:
    data = load_data(cfg)
    est = fit(model_spec(cfg, data), data, fit_options(cfg))
    if est.latent is None:
        raise CKSVARError("latent smoothing failed at the optimum; no shadow rate to report")
    progress("solving identified set", 60.0)
    identified = _identified(cfg, est, data)
    frame = shadow_rate_envelope(identified, cfg.alpha, est.latent)
    if cfg.xi is not None:
        point = min(identified.accepted(), key=lambda pt: (abs(pt.xi - cfg.xi), pt.solution_index))
        frame[f"xi={point.xi:g}"] = shadow_rate_path(point, cfg.alpha, est.latent)
    at_bound = frame[frame["elb"] == 1]
    text = at_bound.to_string(index=False, float_format=lambda v: f"{v:.3f}")
    payload = {"estimation": est.to_dict(), "xi_projection": identified.xi_projection(), "alpha": cfg.alpha,
               "latent": est.latent.to_dict()}
    return CommandOutput(payload=payload, frame=frame, text=text, converged=est.converged)


def _dsge_params(cfg: RunConfig) -> DSGEParams:
    return DSGEParams.baseline(alpha=cfg.alpha, lambda_star=cfg.xi / (1.0 + cfg.alpha))


def cmd_dsge(cfg: RunConfig, progress: ProgressFn = _noop) -> CommandOutput:
    if cfg.subcommand == "scenario":
        overrides = {} if cfg.xi is None else {"xi_grid": [cfg.xi], "alpha": cfg.alpha}
        result = run_scenario(load_scenario(cfg.scenario), overrides, workers=cfg.workers)
        summary = result.frame.groupby(["case", "method"], sort=False)["elb"].sum().rename("periods at ELB")
        text = f"demand shock {result.demand_shock:.6g}\n" + summary.to_string()
        payload = {"scenario": result.scenario.model_dump(mode="json"), "demand_shock": result.demand_shock,
                   "meta": result.meta}
        return CommandOutput(payload=payload, frame=result.frame, text=text)
    params = _dsge_params(cfg)
    if cfg.subcommand == "girf":
        frame = dsge_girf(params, cfg.method, shock=cfg.shock, horizon=cfg.horizon)
        payload = {"params": params.to_dict(), "girf": dict(frame.attrs)}
        return CommandOutput(payload=payload, frame=frame,
                             text=frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    exported = export_as_cksvar(params)
    s = exported.structural
    text = (f"{exported.spec.label()}  xi={s.xi:g}  beta={s.beta.round(6).tolist()}  "
            f"gamma={s.gamma.round(6).tolist()}  bound={exported.bound:.6g}")
    return CommandOutput(payload={"params": params.to_dict(), "cksvar": exported.to_dict()}, text=text)


COMMAND_HANDLERS: Dict[str, Callable[..., CommandOutput]] = {
    "ingest": cmd_ingest,
    "estimate": cmd_estimate,
    "test": cmd_test,
    "idset": cmd_idset,
    "irf": cmd_irf,
    "shadow": cmd_shadow,
    "dsge": cmd_dsge,
}


def artifact_stem(cfg: RunConfig, suffix: str = "") -> str:
    command = cfg.command_name + (f"-{suffix}" if suffix else "")
    return safe_stem(command, cfg.dataset_name, cfg.spec_label(), cfg.seed)


def run(cfg: RunConfig, progress: ProgressFn = _noop) -> Tuple[CommandOutput, Dict[str, str]]:
    """Run one command and write its artifacts; returns (output, written paths)."""
    output = COMMAND_HANDLERS[cfg.command](cfg, progress)
    payload = {
        "config": cfg.model_dump(mode="json"),
        "inputs": input_hashes(cfg),
        "converged": output.converged,
        "result": output.payload,
    }
    out_dir = cfg.out or get_settings().output_dir
    written = write_artifacts(artifact_stem(cfg), payload, output.frame, output.text, out_dir)
    for suffix, frame in output.extra.items():
        stem = artifact_stem(cfg, suffix)
        frame.to_csv(Path(out_dir) / f"{stem}.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        written[suffix] = str(Path(out_dir) / f"{stem}.csv")
    return output, written


def _pairs(values: Optional[Sequence[str]], what: str) -> Optional[Dict[str, str]]:
    if not values:
        return None
    out = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigValidationError([f"{what} expects NAME=VALUE, got {item!r}"])
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS)
    common.add_argument("--log-level", default=argparse.SUPPRESS)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", type=Path)
    model.add_argument("--variant", choices=["cksvar", "ksvar", "csvar"])
    model.add_argument("-p", "--p", type=int)
    model.add_argument("--n-starts", type=int)
    model.add_argument("--n-particles", type=int)
    model.add_argument("--covariance", choices=["hessian", "bfgs", "none"])

    ident = argparse.ArgumentParser(add_help=False)
    ident.add_argument("--xi", type=float)
    ident.add_argument("--xi-step", type=float)
    ident.add_argument("--alpha", type=float)
    ident.add_argument("--sign", action="append", metavar="VAR=SIGN", help="sign restriction, SIGN is >=0, <=0 or free")
    ident.add_argument("--sign-horizons", type=int, nargs=2)
    ident.add_argument("--sign-draws", type=int)

    response = argparse.ArgumentParser(add_help=False)
    response.add_argument("--shock", type=float)
    response.add_argument("--horizon", type=int)

    parser = argparse.ArgumentParser(prog="elb-cksvar", parents=[common],
                                     description="Censored and kinked SVAR toolkit for the effective lower bound")
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", parents=[common], help="assemble a quarterly dataset from CSV series")
    ingest.add_argument("--preset", choices=sorted(PRESETS))
    ingest.add_argument("--recipe", type=Path)
    ingest.add_argument("--source", dest="sources", type=Path, action="append")
    ingest.add_argument("--name")
    ingest.add_argument("--exog-equation", dest="exog_equation", action="append", metavar="CONTROL=EQ1,EQ2")

    commands.add_parser("estimate", parents=[common, model], help="maximum likelihood fit")

    test = commands.add_parser("test", help="likelihood-ratio tests")
    tests = test.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS["test"]:
        sub = tests.add_parser(name, parents=[common, model])
        if name == "lag-select":
            sub.add_argument("--pmax", type=int)
        if name in ("ih1", "excl-long"):
            sub.add_argument("--long-rate")
        if name == "excl-long":
            sub.add_argument("--excluded")
            sub.add_argument("--targets", nargs="+")

    commands.add_parser("idset", parents=[common, model, ident], help="identified set of xi")

    irf = commands.add_parser("irf", parents=[common, model, ident, response], help="generalized impulse responses")
    irf.add_argument("--date")
    irf.add_argument("--draws", type=int)
    irf.add_argument("--cumulative", action="store_true", default=None)
    irf.add_argument("--timeline", type=int, nargs="+")
    irf.add_argument("--bootstrap", type=int)

    commands.add_parser("shadow", parents=[common, model, ident], help="shadow-rate envelope")

    dsge = commands.add_parser("dsge", help="calibrated model with the lower bound")
    dsge_cmds = dsge.add_subparsers(dest="subcommand", required=True)
    scenario = dsge_cmds.add_parser("scenario", parents=[common])
    scenario.add_argument("scenario")
    scenario.add_argument("--xi", type=float)
    scenario.add_argument("--alpha", type=float)
    for name in ("girf", "export"):
        sub = dsge_cmds.add_parser(name, parents=[common])
        sub.add_argument("--xi", type=float)
        sub.add_argument("--alpha", type=float)
        if name == "girf":
            sub.add_argument("--method", choices=["piecewise", "prop2", "occbin", "linear"])
            sub.add_argument("--shock", type=float)
            sub.add_argument("--horizon", type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = dict(vars(args))
    values.pop("log_level", None)
    problems = []
    for flag, key in (("--sign", "sign"), ("--exog-equation", "exog_equation")):
        try:
            values[key] = _pairs(values.get(key), flag)
        except ConfigValidationError as exc:
            problems.extend(exc.problems)
    values["signs"] = values.pop("sign", None)
    equations = values.pop("exog_equation", None)
    if equations is not None:
        values["exog_equations"] = {k: [e.strip() for e in v.split(",") if e.strip()] for k, v in equations.items()}
    if problems:
        raise ConfigValidationError(problems)
    return RunConfig.resolve(**values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(args, "log_level", None)
    configure_logging(level.upper() if level else None)
    try:
        cfg = config_from_args(args)
        output, written = run(cfg)
    except ConfigValidationError as exc:
        for problem in exc.problems:
            logger.error("config: %s", problem)
        return 2
    except ConvergenceError as exc:
        logger.error("%s did not converge: %s", args.command, exc)
        return 1
    except Exception:
        logger.exception("%s failed", args.command)
        return 2
    if not output.converged:
        logger.error("%s: not every computation converged", cfg.command_name)
        return 1
    logger.info("%s done: %s", cfg.command_name, ", ".join(written.values()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
