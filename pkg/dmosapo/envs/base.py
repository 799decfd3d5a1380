from abc import ABC, abstractmethod
from typing import Any, Optional

import numpy as np


class Environment(ABC):
    """Ground-truth simulator contract.

    States are immutable values; ``step`` returns a new state and never mutates
    its input, so environments can be shared across evaluation episodes.
    """

    name: str = "env"
    obs_dim: int
    action_dim: int
    state_dim: int
    episode_len: int = 400

    # ── dynamics ────────────────────────────────────────────────

    @abstractmethod
    def reset(self, rng: np.random.Generator) -> Any:
        ...

    @abstractmethod
    def step(self, state: Any, action: np.ndarray) -> Any:
        ...

    @abstractmethod
    def observe(self, state: Any) -> np.ndarray:
        ...

    @abstractmethod
    def success(self, state: Any) -> bool:
        ...

    # ── state (de)serialization ─────────────────────────────────

    @abstractmethod
    def state_vector(self, state: Any) -> np.ndarray:
        ...

    @abstractmethod
    def state_from_vector(self, vec: np.ndarray) -> Any:
        ...

    def state_from_observation(self, obs: np.ndarray) -> Any:
        """Only defined for fully observable, state-vector observation modes."""
        raise NotImplementedError(f"{self.name} cannot recover a state from its observation")

    # ── model-space predicates & controllers ────────────────────

    @abstractmethod
    def success_from_observation(self, obs: np.ndarray) -> bool:
        ...

    @abstractmethod
    def goal_distance(self, obs: np.ndarray) -> float:
        """Task-space distance of an observation from the goal configuration."""

    @abstractmethod
    def oracle_action(self, state: Any) -> np.ndarray:
        """Scripted goal-directed controller (collection and oracle evaluation)."""

    def wander_action(self, rng: np.random.Generator, previous: Optional[np.ndarray]) -> np.ndarray:
        """Random-walk exploration with momentum."""
        fresh = rng.uniform(-1.0, 1.0, size=self.action_dim)
        if previous is None:
            return fresh
        return np.clip(0.7 * previous + 0.3 * fresh, -1.0, 1.0)

    def is_stuck(self, state: Any) -> bool:
        return False

    @abstractmethod
    def goal_observation(self) -> np.ndarray:
        ...

    @abstractmethod
    def tracked_position(self, state: Any) -> np.ndarray:
        """2-D point used for trajectory-quality metrics."""

    def true_reward(self, state: Any, action: np.ndarray, next_state: Any) -> float:
        """Analytic reward where one exists; learned rewards are used otherwise."""
        return float(self.success(next_state))

    @staticmethod
    def clip_action(action: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
