import asyncio
import json
from typing import Annotated, Any, Dict, Optional

from fastapi import APIRouter, BackgroundTasks, Depends, File, HTTPException, UploadFile
from fastapi.responses import StreamingResponse

from app.api.helper_functions import resolve_config, run_job_background, save_dataset_upload
from app.config import SCENARIO_DIR
from app.dependencies import ComponentManager, get_component_manager, get_task_manager
from app.DSGE.scenarios import load_scenario
from app.errors import CKSVARError
from app.models import EstimateRequest, IdentifiedSetRequest, RunConfig, ScenarioRequest, TestRequest
from app.task_manager import TaskManager

router = APIRouter()

TaskManagerDep = Annotated[TaskManager, Depends(get_task_manager)]
ComponentsDep = Annotated[ComponentManager, Depends(get_component_manager)]


def _submit(cfg: RunConfig, background_tasks: BackgroundTasks, task_manager: TaskManager) -> Dict[str, Any]:
    job = task_manager.create_job(cfg.command_name, cfg.model_dump(mode="json"))
    background_tasks.add_task(run_job_background, cfg, job.id, task_manager)
    return {
        "task_id": job.id,
        "status": job.status.value,
        "message": f"{cfg.command_name} started. Use /api/tasks/{{task_id}} to check progress.",
        "stream_url": f"/api/tasks/{job.id}/stream",
    }


def _dataset_fields(request: EstimateRequest, components: ComponentManager) -> Dict[str, Any]:
    try:
        components.get_dataset(request.dataset)
    except CKSVARError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return {
        "data": components.dataset_path(request.dataset),
        "out": components.settings.output_dir / "api",
        "variant": request.variant,
        "p": request.p,
        "seed": request.seed,
        "n_starts": request.n_starts,
        "n_particles": request.n_particles,
    }


# --- Datasets ---

@router.get("/datasets")
def list_datasets(components: ComponentsDep):
    return components.list_datasets()


@router.post("/datasets")
async def upload_dataset(
    components: ComponentsDep,
    file: UploadFile = File(...),
    manifest: Optional[UploadFile] = File(None),
):
    """Upload a dataset CSV (date, variables, controls, bound) and its optional JSON header."""
    return save_dataset_upload(components.settings.data_dir, file, manifest)


@router.get("/datasets/{name}")
def describe_dataset(name: str, components: ComponentsDep):
    try:
        dataset = components.get_dataset(name)
    except CKSVARError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return {
        "dataset": name,
        "dates": [dataset.dates[0], dataset.dates[-1]],
        "variables": list(dataset.endog_names),
        "exog": list(dataset.exog_names),
        "constrained": dataset.policy_name,
        "roles": dataset.roles,
        "fingerprint": dataset.fingerprint(),
    }


# --- Async jobs ---

@router.post("/estimate/async")
async def estimate_async(request: EstimateRequest, background_tasks: BackgroundTasks,
                         task_manager: TaskManagerDep, components: ComponentsDep):
    cfg = resolve_config(command="estimate", **_dataset_fields(request, components))
    return _submit(cfg, background_tasks, task_manager)


@router.post("/test/async")
async def test_async(request: TestRequest, background_tasks: BackgroundTasks,
                     task_manager: TaskManagerDep, components: ComponentsDep):
    cfg = resolve_config(command="test", subcommand=request.test, pmax=request.pmax, long_rate=request.long_rate,
                         excluded=request.excluded, targets=request.targets,
                         **_dataset_fields(request, components))
    return _submit(cfg, background_tasks, task_manager)


@router.post("/idset/async")
async def idset_async(request: IdentifiedSetRequest, background_tasks: BackgroundTasks,
                      task_manager: TaskManagerDep, components: ComponentsDep):
    cfg = resolve_config(command="idset", xi_step=request.xi_step, alpha=request.alpha, signs=request.signs,
                         sign_horizons=request.sign_horizons, sign_draws=request.sign_draws,
                         **_dataset_fields(request, components))
    return _submit(cfg, background_tasks, task_manager)


@router.get("/dsge/scenarios")
def list_scenarios():
    out = {}
    for path in sorted(SCENARIO_DIR.glob("*.env")):
        scenario = load_scenario(path)
        out[scenario.name] = {"kind": scenario.scenario_kind, "description": scenario.description}
    return out


@router.post("/dsge/scenario/async")
async def dsge_scenario_async(request: ScenarioRequest, background_tasks: BackgroundTasks,
                              task_manager: TaskManagerDep, components: ComponentsDep):
    try:
        load_scenario(request.scenario)
    except CKSVARError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    cfg = resolve_config(command="dsge", subcommand="scenario", scenario=request.scenario, xi=request.xi,
                         alpha=request.alpha, seed=request.seed, out=components.settings.output_dir / "api")
    return _submit(cfg, background_tasks, task_manager)


# --- Task status ---

@router.get("/tasks/{task_id}")
def get_task_status(task_id: str, task_manager: TaskManagerDep):
    job = task_manager.get_job(task_id)
    if not job:
        raise HTTPException(status_code=404, detail=f"Task {task_id} not found")
    return job.to_dict()


@router.get("/tasks/{task_id}/stream")
async def stream_task_progress(task_id: str, task_manager: TaskManagerDep):
    """Server-Sent Events stream of job updates until the job finishes."""
    if not task_manager.get_job(task_id):
        raise HTTPException(status_code=404, detail=f"Task {task_id} not found")

    async def event_generator():
        queue: asyncio.Queue = asyncio.Queue(maxsize=100)
        task_manager.subscribe(task_id, queue)
        try:
            current = task_manager.get_job(task_id)
            yield f"data: {json.dumps(current.to_dict())}\n\n"
            if current.finished:
                return
            while True:
                try:
                    update = await asyncio.wait_for(queue.get(), timeout=30.0)
                except asyncio.TimeoutError:
                    yield ": heartbeat\n\n"
                    current = task_manager.get_job(task_id)
                    if current and current.finished:
                        yield f"data: {json.dumps(current.to_dict())}\n\n"
                        break
                    continue
                yield f"data: {json.dumps(update)}\n\n"
                if update["status"] in ("completed", "not_converged", "failed"):
                    break
        finally:
            task_manager.unsubscribe(task_id, queue)

    return StreamingResponse(
        event_generator(),
        media_type="text/event-stream",
        headers={"Cache-Control": "no-cache", "Connection": "keep-alive", "X-Accel-Buffering": "no"},
    )


@router.get("/tasks")
def get_all_tasks(task_manager: TaskManagerDep):
    return task_manager.all_jobs()
