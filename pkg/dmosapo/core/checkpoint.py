"""Shared checkpoint format: ``<stem>.json`` header + ``<stem>.bin`` little-endian float64 blob."""

import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from dmosapo.core.exceptions import CheckpointFormatError
from dmosapo.schemas.checkpoint import CHECKPOINT_SCHEMA_VERSION, CheckpointHeader, ParamEntry

logger = logging.getLogger(__name__)


def save_checkpoint(
    stem,
    kind: str,
    params: Dict[str, np.ndarray],
    architecture: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append(ParamEntry(name=name, shape=list(arr.shape), offset=offset))
        chunks.append(arr.reshape(-1))
        offset += arr.size
    header = CheckpointHeader(kind=kind, architecture=architecture or {}, extra=extra or {}, params=entries)
    blob = np.concatenate(chunks).astype("<f8") if chunks else np.zeros(0, dtype="<f8")
    stem.with_suffix(".bin").write_bytes(blob.tobytes())
    stem.with_suffix(".json").write_text(
        json.dumps(header.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
    )
    logger.debug(f"Saved checkpoint {stem} ({kind}, {offset} floats)")
    return stem


def load_checkpoint(stem, kind: Optional[str] = None) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    stem = Path(stem)
    header_path, blob_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not header_path.is_file() or not blob_path.is_file():
        raise CheckpointFormatError(f"Checkpoint '{stem}' not found (need .json and .bin)")
    try:
        raw = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"Checkpoint header '{header_path}' is not JSON: {e}") from None
    if raw.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointFormatError(
            f"Unsupported checkpoint schema_version {raw.get('schema_version')!r} "
            f"(expected {CHECKPOINT_SCHEMA_VERSION})"
        )
    try:
        header = CheckpointHeader.model_validate(raw)
    except ValidationError as e:
        raise CheckpointFormatError(f"Invalid checkpoint header: {e}") from None
    if kind is not None and header.kind != kind:
        raise CheckpointFormatError(f"Checkpoint '{stem}' holds a '{header.kind}', expected '{kind}'")

    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    params = {}
    for entry in header.params:
        size = int(np.prod(entry.shape)) if entry.shape else 1
        if entry.offset + size > blob.size:
            raise CheckpointFormatError(f"Parameter '{entry.name}' runs past the end of the blob")
        params[entry.name] = blob[entry.offset:entry.offset + size].reshape(entry.shape).astype(np.float64)
    return header, params
