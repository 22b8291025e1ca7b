import logging
import shutil
from pathlib import Path
from typing import Any, Dict

from fastapi import HTTPException, UploadFile
from werkzeug.utils import secure_filename

from app.cli import run
from app.errors import CKSVARError, ConfigValidationError, ConvergenceError
from app.Loaders.data_ingest import read_dataset
from app.models import RunConfig
from app.serialization import to_jsonable
from app.task_manager import JobStatus, TaskManager

logger = logging.getLogger(__name__)


def resolve_config(**values: Any) -> RunConfig:
    try:
        return RunConfig.resolve(**values)
    except ConfigValidationError as exc:
        raise HTTPException(status_code=400, detail={"problems": exc.problems}) from exc


def save_dataset_upload(data_dir: Path, csv_file: UploadFile, manifest_file: UploadFile = None) -> Dict[str, Any]:
    """Store an uploaded dataset (CSV plus optional JSON header) and check that it loads."""
    if not csv_file.filename or not csv_file.filename.lower().endswith(".csv"):
        raise HTTPException(status_code=400, detail="dataset must be a .csv file")
    stem = Path(secure_filename(csv_file.filename)).stem
    if not stem:
        raise HTTPException(status_code=400, detail="invalid dataset file name")
    data_dir.mkdir(parents=True, exist_ok=True)
    targets = [(csv_file, data_dir / f"{stem}.csv")]
    if manifest_file is not None and manifest_file.filename:
        targets.append((manifest_file, data_dir / f"{stem}.json"))
    for upload, target in targets:
        with open(target, "wb") as buffer:
            shutil.copyfileobj(upload.file, buffer)
    try:
        dataset = read_dataset(data_dir / stem).validate()
    except (CKSVARError, KeyError, ValueError) as exc:
        for _, target in targets:
            target.unlink(missing_ok=True)
        raise HTTPException(status_code=400, detail=f"dataset rejected: {exc}") from exc
    logger.info("stored dataset %s (%d x %d)", stem, dataset.T, dataset.k)
    return {
        "dataset": stem,
        "periods": dataset.T,
        "variables": list(dataset.endog_names),
        "constrained": dataset.policy_name,
        "fingerprint": dataset.fingerprint(),
    }


# --- Background job bodies ---

def run_job_background(cfg: RunConfig, job_id: str, task_manager: TaskManager):
    """Run one command for the API, mirroring the CLI's artifacts and exit semantics."""
    try:
        task_manager.update_progress(job_id, f"running {cfg.command_name}", 5)
        output, written = run(cfg, lambda stage, pct: task_manager.update_progress(job_id, stage, pct))
        task_manager.complete_job(job_id, to_jsonable(output.payload), written, converged=output.converged)
    except ConvergenceError as exc:
        logger.warning("job %s (%s) did not converge: %s", job_id, cfg.command_name, exc)
        task_manager.fail_job(job_id, f"{type(exc).__name__}: {exc}", status=JobStatus.NOT_CONVERGED)
    except CKSVARError as exc:
        logger.warning("job %s (%s) failed: %s", job_id, cfg.command_name, exc)
        task_manager.fail_job(job_id, f"{type(exc).__name__}: {exc}")
    except Exception as exc:
        logger.exception("job %s (%s) crashed", job_id, cfg.command_name)
        task_manager.fail_job(job_id, f"{type(exc).__name__}: {exc}")
