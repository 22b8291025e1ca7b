import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent
SCENARIO_DIR = Path(__file__).resolve().parent / "DSGE" / "scenarios"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    """Process-wide defaults, overridable through the environment or a .env file."""
    workers: int = 4
    output_dir: Path = BASE_DIR / "results"
    data_dir: Path = BASE_DIR / "data"
    log_level: str = "INFO"
    bound_tol: float = 1e-6
    singularity_guard: float = 1e-8
    lr_tol: float = 1e-4


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings(
        workers=max(1, int(os.getenv("CKSVAR_WORKERS", "4"))),
        output_dir=Path(os.getenv("CKSVAR_OUTPUT_DIR", str(BASE_DIR / "results"))),
        data_dir=Path(os.getenv("CKSVAR_DATA_DIR", str(BASE_DIR / "data"))),
        log_level=os.getenv("CKSVAR_LOG_LEVEL", "INFO").upper(),
        bound_tol=float(os.getenv("CKSVAR_BOUND_TOL", "1e-6")),
        singularity_guard=float(os.getenv("CKSVAR_SINGULARITY_GUARD", "1e-8")),
        lr_tol=float(os.getenv("CKSVAR_LR_TOL", "1e-4")),
    )


def configure_logging(level: str = None) -> None:
    logging.basicConfig(level=(level or get_settings().log_level), format=LOG_FORMAT)
