import zlib

import numpy as np


def child_seed_sequence(seed: int, *keys: str) -> np.random.SeedSequence:
    """Derive an independent stream from the experiment seed and a key path,
    e.g. ``("global", "member", "3")``. Same (seed, keys) -> same stream."""
    spawn_key = tuple(zlib.crc32(str(k).encode("utf-8")) for k in keys)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)


def rng_for(seed: int, *keys: str) -> np.random.Generator:
    return np.random.default_rng(child_seed_sequence(seed, *keys))


def stage_seed(seed: int, *keys: str) -> int:
    """Integer seed for constructors that take one (model init, rollout handles)."""
    return int(child_seed_sequence(seed, *keys).generate_state(1)[0])
