import asyncio
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple


class JobStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    NOT_CONVERGED = "not_converged"
    FAILED = "failed"


FINAL_STATES = (JobStatus.COMPLETED, JobStatus.NOT_CONVERGED, JobStatus.FAILED)


@dataclass
class JobProgress:
    stage: str = ""
    percentage: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"stage": self.stage, "percentage": round(self.percentage, 2)}


@dataclass
class Job:
    """One background command run by the API."""
    id: str
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    status: JobStatus = JobStatus.PENDING
    progress: JobProgress = field(default_factory=JobProgress)
    result: Optional[Dict[str, Any]] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    error: Optional[str] = None
    created_at: datetime = field(default_factory=datetime.now)
    updated_at: datetime = field(default_factory=datetime.now)

    @property
    def finished(self) -> bool:
        return self.status in FINAL_STATES

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "command": self.command,
            "config": self.config,
            "status": self.status.value,
            "progress": self.progress.to_dict(),
            "result": self.result,
            "artifacts": self.artifacts,
            "error": self.error,
            "created_at": self.created_at.isoformat(),
            "updated_at": self.updated_at.isoformat(),
        }


class TaskManager:
    """In-memory job registry; updates are pushed to SSE subscribers on their own event loop."""

    _instance: Optional["TaskManager"] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._jobs: Dict[str, Job] = {}
            cls._instance._subscribers: Dict[str, List[Tuple[asyncio.AbstractEventLoop, asyncio.Queue]]] = {}
            cls._instance._lock = threading.Lock()
        return cls._instance

    def create_job(self, command: str, config: Optional[Dict[str, Any]] = None) -> Job:
        job = Job(id=uuid.uuid4().hex[:8], command=command, config=dict(config or {}))
        with self._lock:
            self._jobs[job.id] = job
        return job

    def get_job(self, job_id: str) -> Optional[Job]:
        return self._jobs.get(job_id)

    def _update(self, job_id: str, **changes: Any) -> None:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                return
            for name, value in changes.items():
                setattr(job, name, value)
            job.updated_at = datetime.now()
            snapshot = job.to_dict()
            subscribers = list(self._subscribers.get(job_id, ()))
        for loop, queue in subscribers:
            loop.call_soon_threadsafe(self._offer, queue, snapshot)

    @staticmethod
    def _offer(queue: asyncio.Queue, snapshot: Dict[str, Any]) -> None:
        try:
            queue.put_nowait(snapshot)
        except asyncio.QueueFull:
            pass

    def update_progress(self, job_id: str, stage: str, percentage: float) -> None:
        self._update(job_id, status=JobStatus.RUNNING,
                     progress=JobProgress(stage=stage, percentage=min(percentage, 100.0)))

    def complete_job(self, job_id: str, result: Dict[str, Any], artifacts: Dict[str, str],
                     converged: bool = True) -> None:
        status = JobStatus.COMPLETED if converged else JobStatus.NOT_CONVERGED
        self._update(job_id, status=status, result=result, artifacts=artifacts,
                     progress=JobProgress(stage="done", percentage=100.0))

    def fail_job(self, job_id: str, error: str, status: JobStatus = JobStatus.FAILED) -> None:
        self._update(job_id, status=status, error=error)

    def subscribe(self, job_id: str, queue: asyncio.Queue) -> None:
        loop = asyncio.get_running_loop()
        with self._lock:
            self._subscribers.setdefault(job_id, []).append((loop, queue))

    def unsubscribe(self, job_id: str, queue: asyncio.Queue) -> None:
        with self._lock:
            entries = self._subscribers.get(job_id, [])
            self._subscribers[job_id] = [(lp, q) for lp, q in entries if q is not queue]

    def all_jobs(self) -> Dict[str, Dict[str, Any]]:
        return {jid: job.to_dict() for jid, job in self._jobs.items()}

    def cleanup_old_jobs(self, max_age_hours: int = 24) -> int:
        now = datetime.now()
        with self._lock:
            stale = [jid for jid, job in self._jobs.items()
                     if job.finished and (now - job.created_at).total_seconds() / 3600 > max_age_hours]
            for jid in stale:
                self._jobs.pop(jid, None)
                self._subscribers.pop(jid, None)
        return len(stale)


task_manager = TaskManager()


def get_task_manager() -> TaskManager:
    return task_manager
