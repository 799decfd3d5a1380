"""
Planar quasi-static pushing: a disc agent pushes a square (or T-shaped) block
towards the workspace center.

The block has no momentum. When the agent disc penetrates the block, the block
translates by the penetration-resolving displacement along the contact normal and
rotates by a torque term proportional to the tangential lever arm of the contact
point. All bodies are clamped to the unit workspace.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from dmosapo.envs.base import Environment

AGENT_RADIUS = 0.03
BLOCK_HALF = 0.06
MAX_SPEED = 0.05
GOAL = np.array([0.5, 0.5])
GOAL_POS_TOL = 0.05
GOAL_YAW_TOL = 0.2
ROTATION_GAIN = 1.0
GRID = 16
CONTACT_EPS = 1e-9

# (center_x, center_y, half_x, half_y) in the block frame
SQUARE = [(0.0, 0.0, BLOCK_HALF, BLOCK_HALF)]
T_SHAPE = [
    (-0.055, 0.045, 0.035, 0.02),
    (0.055, 0.045, 0.035, 0.02),
    (0.0, 0.0, 0.02, 0.065),
]


def wrap_angle(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    return float(np.pi - (np.pi - yaw) % (2.0 * np.pi))


def rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    block_pos: np.ndarray
    block_yaw: float
    step_index: int = 0

    def to_vector(self) -> np.ndarray:
        return np.array([*self.agent_pos, *self.block_pos, self.block_yaw], dtype=np.float64)


def _rect_contact(p: np.ndarray, rect: tuple, radius: float) -> Optional[Tuple[float, np.ndarray, np.ndarray]]:
    """Penetration of a disc at ``p`` into one rectangle, all in the block frame.

    Returns (depth, normal pointing from block to agent, contact point) or None.
    """
    cx, cy, hx, hy = rect
    center = np.array([cx, cy])
    half = np.array([hx, hy])
    d = p - center
    q = np.clip(d, -half, half)
    diff = d - q
    dist = float(np.hypot(*diff))
    if dist > 1e-12:
        if dist >= radius:
            return None
        return radius - dist, diff / dist, q + center
    depth = half - np.abs(d)
    axis = int(np.argmin(depth))
    sign = 1.0 if d[axis] >= 0 else -1.0
    normal = np.zeros(2)
    normal[axis] = sign
    point = d.copy()
    point[axis] = sign * half[axis]
    return float(depth[axis]) + radius, normal, point + center


class PushEnv(Environment):
    name = "push"
    action_dim = 2
    state_dim = 5

    def __init__(
        self,
        observation: str = "state",
        shape: str = "square",
        view_mask: bool = False,
        episode_len: int = 400,
    ):
        if observation not in ("state", "raster"):
            raise ValueError(f"Unknown observation mode '{observation}'")
        self.observation = observation
        self.shape = shape
        self.rects: List[tuple] = T_SHAPE if shape == "t" else SQUARE
        self.view_mask = view_mask
        self.episode_len = episode_len
        self.obs_dim = 6 if observation == "state" else GRID * GRID
        self.block_margin = max(
            float(np.hypot(abs(cx) + hx, abs(cy) + hy)) for cx, cy, hx, hy in self.rects
        )
        self.face_half = max(max(abs(cx) + hx, abs(cy) + hy) for cx, cy, hx, hy in self.rects)
        centers = (np.arange(GRID) + 0.5) / GRID
        gx, gy = np.meshgrid(centers, centers)  # [row=y, col=x]
        self._cell_centers = np.stack([gx.ravel(), gy.ravel()], axis=1)

    # ── dynamics ────────────────────────────────────────────────

    def reset(self, rng: np.random.Generator) -> EnvState:
        while True:
            block = rng.uniform(0.25, 0.75, size=2)
            yaw = float(rng.uniform(-np.pi / 3, np.pi / 3))
            if not self._solved(block, yaw):
                break
        while True:
            agent = rng.uniform(0.1, 0.9, size=2)
            if np.hypot(*(agent - block)) > self.block_margin + AGENT_RADIUS + 0.02:
                break
        return EnvState(agent_pos=agent, block_pos=block, block_yaw=yaw, step_index=0)

    def _deepest_contact(self, agent: np.ndarray, block: np.ndarray, yaw: float):
        p = rotation(-yaw) @ (agent - block)
        best = None
        for rect in self.rects:
            hit = _rect_contact(p, rect, AGENT_RADIUS)
            if hit is not None and (best is None or hit[0] > best[0]):
                best = hit
        if best is None or best[0] <= CONTACT_EPS:
            return None
        return best

    def _separate_agent(self, agent, block, yaw) -> np.ndarray:
        hit = self._deepest_contact(agent, block, yaw)
        if hit is None:
            return agent
        depth, normal, _ = hit
        return agent + rotation(yaw) @ normal * depth

    def step(self, state: EnvState, action: np.ndarray) -> EnvState:
        a = self.clip_action(action)
        agent = np.clip(state.agent_pos + a * MAX_SPEED, 0.0, 1.0)
        block = state.block_pos.copy()
        yaw = state.block_yaw

        hit = self._deepest_contact(agent, block, yaw)
        if hit is not None:
            depth, normal, point = hit
            push = -normal
            torque = point[0] * push[1] - point[1] * push[0]
            block = block + rotation(yaw) @ push * depth
            yaw = wrap_angle(yaw + ROTATION_GAIN * torque * depth / BLOCK_HALF ** 2)
            agent = self._separate_agent(agent, block, yaw)
            clamped = np.clip(block, self.block_margin, 1.0 - self.block_margin)
            if not np.array_equal(clamped, block):
                block = clamped
                agent = self._separate_agent(agent, block, yaw)
            agent = np.clip(agent, 0.0, 1.0)

        return EnvState(agent_pos=agent, block_pos=block, block_yaw=yaw, step_index=state.step_index + 1)

    def _solved(self, block: np.ndarray, yaw: float) -> bool:
        return bool(np.hypot(*(block - GOAL)) < GOAL_POS_TOL and abs(yaw) < GOAL_YAW_TOL)

    def success(self, state: EnvState) -> bool:
        return self._solved(state.block_pos, state.block_yaw)

    def is_stuck(self, state: EnvState) -> bool:
        near = np.minimum(state.block_pos, 1.0 - state.block_pos) < self.block_margin + 0.015
        return bool(np.all(near))

    # ── observations ────────────────────────────────────────────

    def _block_visible(self, state: EnvState) -> bool:
        if not self.view_mask:
            return True
        axis = GOAL - state.agent_pos
        to_block = state.block_pos - state.agent_pos
        dist = np.hypot(*to_block)
        if dist < 1e-9:
            return True
        if dist > 0.5:
            return False
        norm_axis = np.hypot(*axis)
        if norm_axis < 1e-9:
            return True
        cos_angle = float(axis @ to_block) / (norm_axis * dist)
        return cos_angle >= np.cos(np.pi / 4)

    def observe(self, state: EnvState) -> np.ndarray:
        visible = self._block_visible(state)
        if self.observation == "state":
            block = np.array([*state.block_pos, np.cos(state.block_yaw), np.sin(state.block_yaw)])
            if not visible:
                block = np.zeros(4)
            return np.concatenate([state.agent_pos, block])
        grid = np.zeros(GRID * GRID)
        if visible:
            local = (self._cell_centers - state.block_pos) @ rotation(state.block_yaw)
            inside = np.zeros(len(local), dtype=bool)
            for cx, cy, hx, hy in self.rects:
                inside |= (np.abs(local[:, 0] - cx) <= hx) & (np.abs(local[:, 1] - cy) <= hy)
            grid[inside] = 0.5
        col, row = np.clip((state.agent_pos * GRID).astype(int), 0, GRID - 1)
        grid[row * GRID + col] = 1.0
        return grid

    def state_vector(self, state: EnvState) -> np.ndarray:
        return state.to_vector()

    def state_from_vector(self, vec: np.ndarray) -> EnvState:
        vec = np.asarray(vec, dtype=np.float64)
        return EnvState(agent_pos=vec[0:2].copy(), block_pos=vec[2:4].copy(), block_yaw=float(vec[4]))

    def state_from_observation(self, obs: np.ndarray) -> EnvState:
        if self.observation != "state":
            return super().state_from_observation(obs)
        obs = np.asarray(obs, dtype=np.float64)
        return EnvState(
            agent_pos=obs[0:2].copy(),
            block_pos=obs[2:4].copy(),
            block_yaw=float(np.arctan2(obs[5], obs[4])),
        )

    def block_position_from_observation(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if self.observation == "state":
            return obs[2:4].copy()
        cells = (obs > 0.25) & (obs < 0.75)
        if not np.any(cells):
            return np.full(2, np.nan)
        return self._cell_centers[cells].mean(axis=0)

    def success_from_observation(self, obs: np.ndarray) -> bool:
        """Model-space success. Raster observations carry no usable yaw, so only
        the block position is checked there."""
        block = self.block_position_from_observation(obs)
        if np.any(np.isnan(block)):
            return False
        if np.hypot(*(block - GOAL)) >= GOAL_POS_TOL:
            return False
        if self.observation == "state":
            yaw = float(np.arctan2(obs[5], obs[4]))
            return abs(yaw) < GOAL_YAW_TOL
        return True

    def goal_distance(self, obs: np.ndarray) -> float:
        block = self.block_position_from_observation(obs)
        if np.any(np.isnan(block)):
            return float("inf")
        return float(np.hypot(*(block - GOAL)))

    def goal_observation(self) -> np.ndarray:
        below = GOAL - np.array([0.0, self.face_half + AGENT_RADIUS + 0.01])
        return self.observe(EnvState(agent_pos=below, block_pos=GOAL.copy(), block_yaw=0.0))

    def tracked_position(self, state: EnvState) -> np.ndarray:
        return state.agent_pos.copy()

    # ── scripted controller ─────────────────────────────────────

    def oracle_action(self, state: EnvState) -> np.ndarray:
        """Goal-directed pusher: rotate the block upright with offset pushes, then
        translate it one block axis at a time with centered pushes."""
        yaw = state.block_yaw
        to_goal = rotation(-yaw) @ (GOAL - state.block_pos)
        hw = self.face_half

        if abs(yaw) > 0.08:
            axis = int(np.argmax(np.abs(to_goal))) if np.hypot(*to_goal) > 0.02 else 0
            sign = np.sign(to_goal[axis]) or 1.0
            offset = -np.sign(yaw) * 0.6 * hw
            rate = ROTATION_GAIN * 0.6 * hw / BLOCK_HALF ** 2
            speed = float(np.clip(min(abs(yaw), 0.15) / rate / MAX_SPEED, 0.1, 1.0))
        else:
            axis = 0 if abs(to_goal[0]) > 0.015 else 1
            if abs(to_goal[axis]) <= 0.015:
                return np.zeros(2)
            sign = np.sign(to_goal[axis])
            offset = float(np.clip(-0.6 * yaw * hw, -0.6 * hw, 0.6 * hw))
            speed = float(np.clip(abs(to_goal[axis]) / MAX_SPEED, 0.1, 1.0))

        push_dir = np.zeros(2)
        push_dir[axis] = sign
        normal = -push_dir
        tangent = np.array([-normal[1], normal[0]])
        p = rotation(-yaw) @ (state.agent_pos - state.block_pos)
        pn, pt = float(p @ normal), float(p @ tangent)
        touch = hw + AGENT_RADIUS

        if touch - 0.03 <= pn <= touch + 0.02 and abs(pt - offset) < 0.02:
            lateral = float(np.clip((offset - pt) / MAX_SPEED, -0.5, 0.5))
            command = push_dir * speed + tangent * lateral
        else:
            clear = touch + 0.04
            if pn < touch + 0.005:
                if abs(pt) < clear - 0.005:
                    waypoint = normal * pn + tangent * ((np.sign(pt) or 1.0) * clear)
                else:
                    waypoint = normal * clear + tangent * pt
            else:
                waypoint = normal * (touch + 0.01) + tangent * offset
            command = (waypoint - p) / MAX_SPEED
            norm = np.hypot(*command)
            if norm > 1.0:
                command = command / norm
        return self.clip_action(rotation(yaw) @ command)
