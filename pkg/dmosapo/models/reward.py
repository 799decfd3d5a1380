"""
Global reward models.

``EnergyModel`` is trained with a Bradley-Terry ranking loss so frames later in a
goal-reaching segment get higher energy. ``IntentRewardHead`` classifies whether a
transition belongs to an intended demonstration and adds a milestone bonus when
the model-space success predicate holds.

Rewards from this module are regression targets only; ``GlobalReward.infer``
returns plain arrays computed under ``no_grad``.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.checkpoint import load_checkpoint, save_checkpoint
from dmosapo.core.exceptions import UnknownComponentError
from dmosapo.envs.base import Environment
from dmosapo.models.nn import MLP, Module

logger = logging.getLogger(__name__)


# ==========================================
# BRADLEY-TERRY ENERGY
# ==========================================

def bt_loss_from_energies(e_i, e_j, i: np.ndarray, j: np.ndarray) -> ad.Value:
    """Mean of -log sigmoid(f_later - f_earlier); pairs with i == j are skipped."""
    i, j = np.atleast_1d(i), np.atleast_1d(j)
    e_i, e_j = ad.as_value(e_i), ad.as_value(e_j)
    valid = (i != j).astype(np.float64)
    if valid.sum() == 0:
        return ad.Value(0.0)
    sign = np.where(j > i, 1.0, -1.0)         # +1 when j is the later frame
    margin = (e_j - e_i) * sign
    per_pair = ad.softplus(-margin) * valid
    return ad.vsum(per_pair) * (1.0 / valid.sum())


class EnergyModel(Module):
    """f(s | s_start, s_goal) -> scalar energy."""

    def __init__(self, obs_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.hidden = hidden
        self.net = MLP([3 * obs_dim, hidden, hidden, 1], rng)
        self.obs_mean = np.zeros(obs_dim)
        self.obs_std = np.ones(obs_dim)
        # standardization of energies before the tanh squash
        self.energy_mean = 0.0
        self.energy_std = 1.0
        self.trained_steps = 0

    def _norm(self, obs) -> np.ndarray:
        return (np.atleast_2d(obs) - self.obs_mean) / self.obs_std

    def energy(self, obs, start, goal) -> ad.Value:
        obs = np.atleast_2d(obs)
        start = np.broadcast_to(np.atleast_2d(start), obs.shape)
        goal = np.broadcast_to(np.atleast_2d(goal), obs.shape)
        x = np.concatenate([self._norm(obs), self._norm(start), self._norm(goal)], axis=1)
        return ad.reshape(self.net(x), (len(obs),))

    def bt_loss(self, s_i, s_j, i, j, s_start, s_goal) -> ad.Value:
        return bt_loss_from_energies(self.energy(s_i, s_start, s_goal), self.energy(s_j, s_start, s_goal), i, j)

    def reward(self, obs, start, goal) -> np.ndarray:
        with ad.no_grad():
            e = self.energy(obs, start, goal).data
        return np.tanh((e - self.energy_mean) / self.energy_std)

    def save(self, stem) -> Path:
        extra = {
            "obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist(),
            "energy_mean": self.energy_mean, "energy_std": self.energy_std,
            "trained_steps": self.trained_steps,
        }
        return save_checkpoint(stem, "energy_reward", self.state_dict(),
                               {"obs_dim": self.obs_dim, "hidden": self.hidden}, extra)

    @classmethod
    def load(cls, stem) -> "EnergyModel":
        header, params = load_checkpoint(stem, kind="energy_reward")
        model = cls(**header.architecture)
        model.load_state_dict(params)
        extra = header.extra
        model.obs_mean = np.asarray(extra["obs_mean"])
        model.obs_std = np.asarray(extra["obs_std"])
        model.energy_mean = float(extra["energy_mean"])
        model.energy_std = float(extra["energy_std"])
        model.trained_steps = int(extra.get("trained_steps", 0))
        return model


# ==========================================
# INTENT HEAD
# ==========================================

class IntentRewardHead(Module):
    """logit of "intended demonstration" from (next observation, action[, global features])."""

    def __init__(self, obs_dim: int, action_dim: int, feature_dim: int = 0,
                 hidden: int = 64, milestone_bonus: float = 10.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.obs_dim, self.action_dim, self.feature_dim = obs_dim, action_dim, feature_dim
        self.hidden = hidden
        self.milestone_bonus = milestone_bonus
        # zero output layer: an untrained head predicts p = 0.5 everywhere
        self.net = MLP([obs_dim + action_dim + feature_dim, hidden, hidden, 1], rng, out_scale=0.0)
        self.obs_mean = np.zeros(obs_dim)
        self.obs_std = np.ones(obs_dim)

    @property
    def uses_features(self) -> bool:
        return self.feature_dim > 0

    def inputs(self, next_obs, action, features=None) -> np.ndarray:
        parts = [(np.atleast_2d(next_obs) - self.obs_mean) / self.obs_std, np.atleast_2d(action)]
        if self.uses_features:
            if features is None:
                raise ValueError("This intent head was trained on global-model features")
            parts.append(np.atleast_2d(features))
        return np.concatenate(parts, axis=1)

    def logits(self, next_obs, action, features=None) -> ad.Value:
        x = self.inputs(next_obs, action, features)
        return ad.reshape(self.net(x), (len(x),))

    def bce(self, next_obs, action, labels, features=None) -> ad.Value:
        z = self.logits(next_obs, action, features)
        y = np.asarray(labels, dtype=np.float64)
        return ad.mean(ad.softplus(z) - z * y)

    def probability(self, next_obs, action, features=None) -> np.ndarray:
        with ad.no_grad():
            return ad.sigmoid(self.logits(next_obs, action, features)).data

    def milestone(self, env: Environment, next_obs) -> np.ndarray:
        next_obs = np.atleast_2d(next_obs)
        return np.array([self.milestone_bonus if env.success_from_observation(o) else 0.0 for o in next_obs])

    def save(self, stem) -> Path:
        arch = {"obs_dim": self.obs_dim, "action_dim": self.action_dim, "feature_dim": self.feature_dim,
                "hidden": self.hidden, "milestone_bonus": self.milestone_bonus}
        extra = {"obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist()}
        return save_checkpoint(stem, "intent_reward", self.state_dict(), arch, extra)

    @classmethod
    def load(cls, stem) -> "IntentRewardHead":
        header, params = load_checkpoint(stem, kind="intent_reward")
        model = cls(**header.architecture)
        model.load_state_dict(params)
        model.obs_mean = np.asarray(header.extra["obs_mean"])
        model.obs_std = np.asarray(header.extra["obs_std"])
        return model


# ==========================================
# INFERENCE FRONT
# ==========================================

class GlobalReward:
    """reward_infer for one reward kind; outputs are plain arrays."""

    def __init__(self, kind: str, env: Environment,
                 energy: Optional[EnergyModel] = None,
                 intent: Optional[IntentRewardHead] = None):
        kind = getattr(kind, "value", kind)
        if kind not in ("energy", "intent", "analytic"):
            raise UnknownComponentError("reward kind", kind, ["energy", "intent", "analytic"])
        if kind == "energy" and energy is None:
            raise ValueError("Energy reward requested without an energy model")
        if kind == "intent" and intent is None:
            raise ValueError("Intent reward requested without an intent head")
        self.kind = kind
        self.env = env
        self.energy = energy
        self.intent = intent

    @property
    def needs_features(self) -> bool:
        return self.kind == "intent" and self.intent.uses_features

    def infer(self, next_obs, action, start_obs=None, features=None) -> np.ndarray:
        next_obs = np.atleast_2d(np.asarray(next_obs, dtype=np.float64))
        action = np.atleast_2d(np.asarray(action, dtype=np.float64))
        if self.kind == "energy":
            start = next_obs if start_obs is None else start_obs
            return self.energy.reward(next_obs, start, self.env.goal_observation())
        if self.kind == "intent":
            return self.intent.probability(next_obs, action, features) + self.intent.milestone(self.env, next_obs)
        return np.array([
            self.env.true_reward(None, a, self.env.state_from_observation(o))
            for o, a in zip(next_obs, action)
        ])


def reward_infer(reward: GlobalReward, next_obs, action, start_obs=None, features=None) -> np.ndarray:
    return reward.infer(next_obs, action, start_obs, features)
