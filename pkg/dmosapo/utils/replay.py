from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from dmosapo.core.exceptions import EmptyReplayBufferError


@dataclass
class TransitionBatch:
    """Single-step local-model training samples."""
    h: np.ndarray          # recurrent context at t
    obs: np.ndarray        # o_t
    action: np.ndarray     # a_t
    next_obs: np.ndarray   # o_{t+1}
    reward: np.ndarray     # reward target for (o_{t+1}, a_t)

    def __len__(self) -> int:
        return len(self.reward)

    def take(self, idx) -> "TransitionBatch":
        return TransitionBatch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @staticmethod
    def concat(a: "TransitionBatch", b: "TransitionBatch") -> "TransitionBatch":
        return TransitionBatch(**{
            f.name: np.concatenate([getattr(a, f.name), getattr(b, f.name)]) for f in fields(TransitionBatch)
        })


class ReplayBuffer:
    """FIFO ring buffer of transitions."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data: Optional[TransitionBatch] = None
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, batch: TransitionBatch):
        if self._data is None:
            self._data = TransitionBatch(**{
                f.name: np.zeros((self.capacity,) + getattr(batch, f.name).shape[1:])
                for f in fields(TransitionBatch)
            })
        n = len(batch)
        if n >= self.capacity:
            batch = batch.take(slice(n - self.capacity, n))
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        for f in fields(TransitionBatch):
            getattr(self._data, f.name)[idx] = getattr(batch, f.name)
        self._next = int((self._next + n) % self.capacity)
        self._size = min(self._size + n, self.capacity)

    def sample(self, rng: np.random.Generator, n: int) -> TransitionBatch:
        if self._size == 0:
            raise EmptyReplayBufferError()
        return self._data.take(rng.integers(self._size, size=n))
