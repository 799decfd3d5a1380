from dataclasses import dataclass

import numpy as np

from dmosapo.envs.base import Environment

DEFAULT_A = np.array([[0.99, 0.05], [-0.05, 0.99]])
DEFAULT_B = 0.1 * np.eye(2)


@dataclass(frozen=True)
class LinearState:
    s: np.ndarray
    step_index: int = 0


class LinearEnv(Environment):
    """s' = A s + B a with reward -|s'|^2 - c |a|^2. Used by the gradient oracles."""

    name = "linear"
    obs_dim = 2
    action_dim = 2
    state_dim = 2

    def __init__(self, A: np.ndarray = DEFAULT_A, B: np.ndarray = DEFAULT_B,
                 action_cost: float = 0.01, episode_len: int = 100):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.action_cost = action_cost
        self.episode_len = episode_len

    def reset(self, rng: np.random.Generator) -> LinearState:
        while True:
            s = rng.uniform(-1.0, 1.0, size=2)
            if np.hypot(*s) > 0.2:
                return LinearState(s=s)

    def step(self, state: LinearState, action: np.ndarray) -> LinearState:
        a = self.clip_action(action)
        return LinearState(s=self.A @ state.s + self.B @ a, step_index=state.step_index + 1)

    def observe(self, state: LinearState) -> np.ndarray:
        return state.s.copy()

    def success(self, state: LinearState) -> bool:
        return bool(np.hypot(*state.s) < 0.1)

    def state_vector(self, state: LinearState) -> np.ndarray:
        return state.s.copy()

    def state_from_vector(self, vec: np.ndarray) -> LinearState:
        return LinearState(s=np.asarray(vec, dtype=np.float64).copy())

    def state_from_observation(self, obs: np.ndarray) -> LinearState:
        return self.state_from_vector(obs)

    def success_from_observation(self, obs: np.ndarray) -> bool:
        return bool(np.hypot(*obs[:2]) < 0.1)

    def goal_distance(self, obs: np.ndarray) -> float:
        return float(np.hypot(*obs[:2]))

    def goal_observation(self) -> np.ndarray:
        return np.zeros(2)

    def tracked_position(self, state: LinearState) -> np.ndarray:
        return state.s.copy()

    def reward(self, next_obs: np.ndarray, action: np.ndarray) -> float:
        return float(-next_obs @ next_obs - self.action_cost * action @ action)

    def true_reward(self, state, action, next_state) -> float:
        return self.reward(next_state.s, self.clip_action(action))

    def oracle_action(self, state: LinearState) -> np.ndarray:
        return self.clip_action(-np.linalg.solve(self.B, self.A @ state.s))
