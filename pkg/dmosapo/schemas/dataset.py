from typing import Dict, List

from pydantic import BaseModel, Field

DATASET_SCHEMA_VERSION = 1


class ArrayFile(BaseModel):
    """One flat little-endian binary file inside a dataset directory."""
    file: str
    dtype: str                      # "<f8" or "u1-packbits"
    shape: List[int]


class DatasetManifest(BaseModel):
    schema_version: int = DATASET_SCHEMA_VERSION
    env: str
    env_config: Dict = Field(default_factory=dict)
    seed: int
    policy: str                     # collection policy id
    n_episodes: int
    n_transitions: int
    episode_lengths: List[int]      # transitions per episode; each has length + 1 frames
    obs_dim: int
    action_dim: int
    state_dim: int
    intent_fraction: float
    arrays: Dict[str, ArrayFile]
