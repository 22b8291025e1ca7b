from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from app.config import get_settings
from app.main import app
from app.task_manager import JobStatus, TaskManager

from conftest import random_dataset

MINI_CSV = b"date,y,i,bound\n2000Q1,1,0.5,0\n2000Q2,2,0,0\n2000Q3,1.5,0.2,0\n"


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("CKSVAR_DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setenv("CKSVAR_OUTPUT_DIR", str(tmp_path / "results"))
    monkeypatch.setenv("CKSVAR_WORKERS", "1")
    get_settings.cache_clear()
    with TestClient(app) as test_client:
        yield test_client
    get_settings.cache_clear()


def test_health(client):
    assert client.get("/health").json() == {"status": "healthy"}
    assert client.get("/").status_code == 200


def test_unknown_task(client):
    assert client.get("/api/tasks/nope").status_code == 404
    assert client.get("/api/tasks/nope/stream").status_code == 404


def test_dataset_upload(client):
    response = client.post("/api/datasets", files={"file": ("mini.csv", MINI_CSV, "text/csv")})
    assert response.status_code == 200
    body = response.json()
    assert body["dataset"] == "mini"
    assert body["periods"] == 3
    assert body["constrained"] == "i"

    assert "mini" in client.get("/api/datasets").json()
    described = client.get("/api/datasets/mini").json()
    assert described["variables"] == ["y", "i"]
    assert described["dates"] == ["2000Q1", "2000Q3"]


def test_dataset_upload_rejections(client):
    response = client.post("/api/datasets", files={"file": ("notes.txt", b"hello", "text/plain")})
    assert response.status_code == 400

    below = b"date,y,i,bound\n2000Q1,1,-0.5,0\n2000Q2,2,0,0\n"
    response = client.post("/api/datasets", files={"file": ("below.csv", below, "text/csv")})
    assert response.status_code == 400
    assert "rejected" in response.json()["detail"]
    assert not (get_settings().data_dir / "below.csv").exists()


def test_unknown_dataset_and_scenario(client):
    response = client.post("/api/estimate/async", json={"dataset": "missing"})
    assert response.status_code == 400
    response = client.post("/api/dsge/scenario/async", json={"scenario": "missing"})
    assert response.status_code == 400


def test_scenario_listing(client):
    scenarios = client.get("/api/dsge/scenarios").json()
    assert scenarios["demand_shock_paths"]["kind"] == "paths"
    assert scenarios["policy_shock_at_elb"]["kind"] == "girf"


def test_scenario_job_runs_to_completion(client):
    response = client.post("/api/dsge/scenario/async", json={"scenario": "demand_shock_paths", "xi": 0.5})
    assert response.status_code == 200
    task_id = response.json()["task_id"]
    job = client.get(f"/api/tasks/{task_id}").json()
    assert job["status"] == "completed", job["error"]
    assert job["command"] == "dsge-scenario"
    assert Path(job["artifacts"]["csv"]).is_file()
    assert job["result"]["scenario"]["xi_grid"] == [0.5]


def test_not_converged_jobs_are_flagged():
    manager = TaskManager()
    job = manager.create_job("estimate")
    manager.complete_job(job.id, {"loglik": -1.0}, {}, converged=False)
    assert manager.get_job(job.id).status == JobStatus.NOT_CONVERGED
    assert manager.get_job(job.id).finished
    failed = manager.create_job("estimate")
    manager.fail_job(failed.id, "boom")
    assert manager.get_job(failed.id).to_dict()["status"] == "failed"


def test_estimate_job_without_a_finite_start_is_not_converged(client, monkeypatch):
    csv = random_dataset(60, 2, seed=3).to_frame().to_csv(index=False).encode()
    assert client.post("/api/datasets", files={"file": ("rand.csv", csv, "text/csv")}).status_code == 200
    monkeypatch.setattr("app.Estimation.estimation.loglik", lambda *args, **kwargs: float("nan"))
    response = client.post("/api/estimate/async", json={"dataset": "rand", "variant": "ksvar", "n_starts": 1})
    job = client.get(f"/api/tasks/{response.json()['task_id']}").json()
    assert job["status"] == "not_converged"
    assert "ConvergenceError" in job["error"]
