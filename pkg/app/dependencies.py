import logging
import threading
from pathlib import Path
from typing import Dict, Optional, Tuple

from app.config import Settings, get_settings
from app.errors import DataValidationError
from app.Loaders.data_ingest import SeriesLoader, read_dataset
from app.Model.types import Dataset
from app.task_manager import TaskManager

logger = logging.getLogger(__name__)


class ComponentManager:
    """Lazily created shared components for the API: settings, job registry, dataset cache."""

    _instance = None
    _lock = threading.Lock()

    def __init__(self):
        self._task_manager: Optional[TaskManager] = None
        self._series_loader: Optional[SeriesLoader] = None
        # path -> (mtime, dataset)
        self._datasets: Dict[Path, Tuple[float, Dataset]] = {}

    @classmethod
    def get_instance(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = cls()
        return cls._instance

    @property
    def settings(self) -> Settings:
        return get_settings()

    def get_task_manager(self) -> TaskManager:
        if self._task_manager is None:
            with self._lock:
                if self._task_manager is None:
                    self._task_manager = TaskManager()
        return self._task_manager

    def get_series_loader(self) -> SeriesLoader:
        if self._series_loader is None:
            self._series_loader = SeriesLoader()
        return self._series_loader

    def dataset_path(self, name: str) -> Path:
        return self.settings.data_dir / Path(name).stem

    def get_dataset(self, name: str) -> Dataset:
        """Load ``<data_dir>/<name>.csv`` once per file modification."""
        path = self.dataset_path(name)
        csv_path = path.with_suffix(".csv")
        if not csv_path.is_file():
            raise DataValidationError(f"dataset {name!r} not found in {self.settings.data_dir}")
        mtime = csv_path.stat().st_mtime
        with self._lock:
            cached = self._datasets.get(path)
            if cached is not None and cached[0] == mtime:
                return cached[1]
        logger.info("loading dataset %s", csv_path)
        dataset = read_dataset(path).validate()
        with self._lock:
            self._datasets[path] = (mtime, dataset)
        return dataset

    def list_datasets(self) -> Dict[str, Dict[str, object]]:
        data_dir = self.settings.data_dir
        if not data_dir.is_dir():
            return {}
        return {p.stem: {"csv": str(p), "has_manifest": p.with_suffix(".json").is_file()}
                for p in sorted(data_dir.glob("*.csv"))}


manager = ComponentManager.get_instance()


def get_task_manager(): return manager.get_task_manager()
def get_series_loader(): return manager.get_series_loader()
def get_component_manager(): return manager
