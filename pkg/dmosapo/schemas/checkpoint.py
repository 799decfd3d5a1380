from typing import Any, Dict, List

from pydantic import BaseModel, Field

CHECKPOINT_SCHEMA_VERSION = 1


class ParamEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int                 # in float64 elements from the start of the blob


class CheckpointHeader(BaseModel):
    """
    JSON header written next to the raw parameter blob.
    ``architecture`` holds constructor arguments; ``extra`` holds fitted constants
    (normalizers, sigma_data, schedules) and training counters.
    """
    schema_version: int = CHECKPOINT_SCHEMA_VERSION
    kind: str
    architecture: Dict[str, Any] = Field(default_factory=dict)
    extra: Dict[str, Any] = Field(default_factory=dict)
    params: List[ParamEntry] = Field(default_factory=list)
