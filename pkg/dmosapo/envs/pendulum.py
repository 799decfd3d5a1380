from dataclasses import dataclass

import numpy as np

from dmosapo.envs.base import Environment
from dmosapo.envs.push import wrap_angle

MAX_TORQUE = 2.0
MAX_SPEED = 8.0
DT = 0.05
GRAVITY = 10.0
LENGTH = 1.0
MASS = 1.0


@dataclass(frozen=True)
class PendulumState:
    theta: float  # 0 is upright
    omega: float
    step_index: int = 0


class PendulumEnv(Environment):
    """Torque-limited swing-up; a fast smoke-test task with a 1-dim action."""

    name = "pendulum"
    obs_dim = 3
    action_dim = 1
    state_dim = 2

    def __init__(self, episode_len: int = 200):
        self.episode_len = episode_len

    def reset(self, rng: np.random.Generator) -> PendulumState:
        while True:
            state = PendulumState(
                theta=float(rng.uniform(-np.pi, np.pi)),
                omega=float(rng.uniform(-1.0, 1.0)),
            )
            if not self.success(state):
                return state

    def step(self, state: PendulumState, action: np.ndarray) -> PendulumState:
        u = float(self.clip_action(action)[0]) * MAX_TORQUE
        accel = 3.0 * GRAVITY / (2.0 * LENGTH) * np.sin(state.theta) + 3.0 / (MASS * LENGTH ** 2) * u
        omega = float(np.clip(state.omega + accel * DT, -MAX_SPEED, MAX_SPEED))
        theta = wrap_angle(state.theta + omega * DT)
        return PendulumState(theta=theta, omega=omega, step_index=state.step_index + 1)

    def observe(self, state: PendulumState) -> np.ndarray:
        return np.array([np.cos(state.theta), np.sin(state.theta), state.omega / MAX_SPEED])

    def success(self, state: PendulumState) -> bool:
        return bool(abs(wrap_angle(state.theta)) < 0.2 and abs(state.omega) < 1.0)

    def state_vector(self, state: PendulumState) -> np.ndarray:
        return np.array([state.theta, state.omega])

    def state_from_vector(self, vec: np.ndarray) -> PendulumState:
        return PendulumState(theta=float(vec[0]), omega=float(vec[1]))

    def state_from_observation(self, obs: np.ndarray) -> PendulumState:
        return PendulumState(theta=float(np.arctan2(obs[1], obs[0])), omega=float(obs[2]) * MAX_SPEED)

    def success_from_observation(self, obs: np.ndarray) -> bool:
        return self.success(self.state_from_observation(obs))

    def goal_distance(self, obs: np.ndarray) -> float:
        return abs(float(np.arctan2(obs[1], obs[0])))

    def goal_observation(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0])

    def tracked_position(self, state: PendulumState) -> np.ndarray:
        return np.array([np.sin(state.theta), np.cos(state.theta)]) * LENGTH

    def true_reward(self, state, action, next_state) -> float:
        u = float(self.clip_action(action)[0]) * MAX_TORQUE
        theta = wrap_angle(next_state.theta)
        return -(theta ** 2 + 0.1 * next_state.omega ** 2 + 0.001 * u ** 2)

    def oracle_action(self, state: PendulumState) -> np.ndarray:
        """Energy pumping far from upright, PD stabilization near it."""
        theta = wrap_angle(state.theta)
        if abs(theta) < 0.5:
            u = -(10.0 * theta + 2.0 * state.omega)
        else:
            inertia = MASS * LENGTH ** 2 / 3.0
            energy = 0.5 * inertia * state.omega ** 2 + MASS * GRAVITY * LENGTH / 2.0 * np.cos(theta)
            target = MASS * GRAVITY * LENGTH / 2.0
            direction = np.sign(state.omega) if abs(state.omega) > 1e-3 else 1.0
            u = 2.0 * (target - energy) * direction
        return self.clip_action(np.array([u / MAX_TORQUE]))
