"""
Atomic file output for CSV tables and JSON result documents.

Every file is written to a temporary sibling first and moved into place with
os.replace, so an interrupted run never leaves a partial file behind.
"""

import json
import logging
import os
import tempfile
from collections.abc import Mapping, Sequence
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

TIMESTAMP_FIELD = "created_at"


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write text to `path` through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.debug("Wrote %s", path)
    return path


def atomic_write_frame(frame: pd.DataFrame, path: str | Path) -> Path:
    """Write a DataFrame as CSV without its index.

    Floats are rendered with their shortest round-trip representation so a
    reload reproduces the values bit for bit.
    """
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def _jsonable(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, Sequence) and not isinstance(value, str):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def dumps_json(payload: Any) -> str:
    """Canonical JSON: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def atomic_write_json(payload: Any, path: str | Path) -> Path:
    return atomic_write_text(path, dumps_json(payload))


def result_document(
    results: Sequence[Mapping[str, Any]], metadata: Mapping[str, Any]
) -> dict[str, Any]:
    """Wrap result records with run metadata and a creation timestamp.

    The timestamp is the only field that differs between reruns of the same
    configuration.
    """
    stamped = dict(metadata)
    stamped[TIMESTAMP_FIELD] = datetime.now(UTC).isoformat(timespec="seconds")
    return {"metadata": stamped, "results": list(results)}


def strip_timestamp(document: Mapping[str, Any]) -> dict[str, Any]:
    """Drop the timestamp from a result document for reproducibility checks."""
    stripped = dict(document)
    metadata = dict(stripped.get("metadata", {}))
    metadata.pop(TIMESTAMP_FIELD, None)
    stripped["metadata"] = metadata
    return stripped
