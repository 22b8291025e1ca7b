"""JSON encoding of results, content hashing and artifact writing."""
import dataclasses
import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def to_jsonable(obj: Any) -> Any:
    """Convert results, numpy arrays and pydantic models into plain JSON values."""
    if hasattr(obj, "to_dict") and not isinstance(obj, pd.DataFrame):
        return to_jsonable(obj.to_dict())
    if isinstance(obj, BaseModel):
        return to_jsonable(obj.model_dump(mode="json"))
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if np.isnan(value):
            return None
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, pd.DataFrame):
        return to_jsonable(obj.to_dict(orient="records"))
    if dataclasses.is_dataclass(obj):
        return to_jsonable(dataclasses.asdict(obj))
    return obj


def _canonical_bytes(part: Any) -> bytes:
    if isinstance(part, np.ndarray):
        arr = np.ascontiguousarray(part, dtype=float)
        return str(arr.shape).encode() + arr.tobytes()
    if isinstance(part, bytes):
        return part
    return json.dumps(to_jsonable(part), sort_keys=True, separators=(",", ":")).encode()


def content_hash(*parts: Any) -> str:
    digest = hashlib.sha256()
    for part in parts:
        chunk = _canonical_bytes(part)
        digest.update(len(chunk).to_bytes(8, "little"))
        digest.update(chunk)
    return f"sha256:{digest.hexdigest()}"


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return f"sha256:{digest.hexdigest()}"


def quarter_labels(start: str, periods: int) -> Tuple[str, ...]:
    return tuple(str(p) for p in pd.period_range(start=start, periods=periods, freq="Q"))


def dumps(payload: Any) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n"


def write_artifacts(
    stem: str,
    payload: Dict[str, Any],
    frame: Optional[pd.DataFrame] = None,
    text: Optional[str] = None,
    out_dir: Optional[Path] = None,
) -> Dict[str, str]:
    """Write ``<stem>.json`` and, when given, ``<stem>.csv`` and ``<stem>.txt``."""
    from app.config import get_settings

    out = Path(out_dir or get_settings().output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    json_path = out / f"{stem}.json"
    json_path.write_text(dumps(payload))
    written["json"] = str(json_path)
    if frame is not None:
        csv_path = out / f"{stem}.csv"
        frame.to_csv(csv_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        written["csv"] = str(csv_path)
    if text is not None:
        txt_path = out / f"{stem}.txt"
        txt_path.write_text(text if text.endswith("\n") else text + "\n")
        written["txt"] = str(txt_path)
    for kind, path in written.items():
        logger.info("wrote %s artifact %s", kind, path)
    return written


def safe_stem(*parts: Any) -> str:
    from werkzeug.utils import secure_filename

    return secure_filename("_".join(str(p) for p in parts if p not in (None, "")))
