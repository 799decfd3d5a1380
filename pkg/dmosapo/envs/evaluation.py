import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Protocol

import numpy as np

from dmosapo.envs.base import Environment

logger = logging.getLogger(__name__)


def true_success(env: Environment, state: Any) -> bool:
    """Ground-truth success judged on the environment state, never on observations."""
    return bool(env.success(state))


class Agent(Protocol):
    """Anything that can act in the true environment.

    Learned agents must only read ``obs``; the ground-truth ``state`` is passed
    for scripted controllers.
    """

    def reset(self, obs: np.ndarray) -> None:
        ...

    def act(self, obs: np.ndarray, state: Any = None) -> np.ndarray:
        ...


class OracleAgent:
    def __init__(self, env: Environment):
        self.env = env

    def reset(self, obs):
        pass

    def act(self, obs, state=None):
        return self.env.oracle_action(state)


class ZeroAgent:
    def __init__(self, action_dim: int):
        self.action_dim = action_dim

    def reset(self, obs):
        pass

    def act(self, obs, state=None):
        return np.zeros(self.action_dim)


@dataclass
class EpisodeResult:
    positions: np.ndarray               # (T + 1, 2) tracked positions
    states: np.ndarray                  # (T + 1, state_dim)
    success: bool
    steps_to_success: Optional[int]     # None when never solved
    total_reward: float


def rollout_eval(
    env: Environment,
    agent: Agent,
    n_episodes: int,
    max_steps: int,
    rng: np.random.Generator,
) -> List[EpisodeResult]:
    """Run ``agent`` in the true environment from randomized starts.

    An episode stops at the first solved state or after ``max_steps`` actions.
    """
    results = []
    for _ in range(n_episodes):
        state = env.reset(rng)
        obs = env.observe(state)
        agent.reset(obs)
        positions = [env.tracked_position(state)]
        states = [env.state_vector(state)]
        total, reached = 0.0, None
        for t in range(max_steps):
            action = env.clip_action(agent.act(obs, state))
            next_state = env.step(state, action)
            total += env.true_reward(state, action, next_state)
            state = next_state
            obs = env.observe(state)
            positions.append(env.tracked_position(state))
            states.append(env.state_vector(state))
            if true_success(env, state):
                reached = t + 1
                break
        results.append(EpisodeResult(
            positions=np.asarray(positions),
            states=np.asarray(states),
            success=reached is not None,
            steps_to_success=reached,
            total_reward=total,
        ))
    n_success = sum(r.success for r in results)
    logger.info(f"Evaluation: {n_success}/{n_episodes} successes")
    return results


def success_rate(results: List[EpisodeResult]) -> float:
    return float(np.mean([r.success for r in results])) if results else 0.0
