from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.core.checkpoint import load_checkpoint, save_checkpoint
from dmosapo.models.nn import MLP, Module

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def tanh_log_det(u) -> Value:
    """log(1 - tanh(u)^2) in the overflow-free form 2 (log 2 - u - softplus(-2u))."""
    u = ad.as_value(u)
    return (np.log(2.0) - u - ad.softplus(u * -2.0)) * 2.0


class SquashedGaussianPolicy(Module):
    """π(a | l): tanh-squashed diagonal Gaussian with clamped log-std."""

    deterministic = False

    def __init__(self, feature_dim: int, action_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.feature_dim, self.action_dim, self.hidden = feature_dim, action_dim, hidden
        self.net = MLP([feature_dim, hidden, hidden, 2 * action_dim], rng, out_scale=0.1)

    def stats(self, features) -> Tuple[Value, Value]:
        out = self.net(features)
        mu = out[..., : self.action_dim]
        log_std = ad.clip(out[..., self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def __call__(self, features, eps: Optional[np.ndarray] = None) -> Tuple[Value, Value]:
        """Reparameterized action and per-sample entropy estimate -log π(a)."""
        mu, log_std = self.stats(features)
        if eps is None:
            eps = np.zeros(mu.shape)
        u = ad.gaussian_sample(mu, log_std, eps)
        action = ad.tanh(u)
        gaussian_nll = log_std + (0.5 * np.asarray(eps) ** 2 + HALF_LOG_2PI)
        entropy = ad.vsum(gaussian_nll + tanh_log_det(u), axis=-1)
        return action, entropy

    def log_prob(self, features, action: np.ndarray) -> Value:
        """log π(a) for given squashed actions (used by the zeroth-order baseline)."""
        mu, log_std = self.stats(features)
        clipped = np.clip(np.asarray(action, dtype=np.float64), -1.0 + 1e-6, 1.0 - 1e-6)
        u = np.arctanh(clipped)
        z = (u - mu) * ad.exp(-log_std)
        log_n = -(z * z) * 0.5 - log_std - HALF_LOG_2PI
        return ad.vsum(log_n - tanh_log_det(u), axis=-1)

    def mode(self, features) -> np.ndarray:
        with ad.no_grad():
            mu, _ = self.stats(features)
        return np.tanh(mu.data)

    def save(self, stem) -> Path:
        arch = {"feature_dim": self.feature_dim, "action_dim": self.action_dim, "hidden": self.hidden}
        return save_checkpoint(stem, "policy", self.state_dict(), arch)

    @classmethod
    def load(cls, stem) -> "SquashedGaussianPolicy":
        header, params = load_checkpoint(stem, kind="policy")
        policy = cls(**header.architecture)
        policy.load_state_dict(params)
        return policy


class Critic(Module):
    """V(l) -> scalar per sample."""

    def __init__(self, feature_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.feature_dim, self.hidden = feature_dim, hidden
        self.net = MLP([feature_dim, hidden, hidden, 1], rng)

    def __call__(self, features) -> Value:
        out = self.net(features)
        return ad.reshape(out, (out.shape[0],))

    def save(self, stem) -> Path:
        return save_checkpoint(stem, "critic", self.state_dict(),
                               {"feature_dim": self.feature_dim, "hidden": self.hidden})

    @classmethod
    def load(cls, stem) -> "Critic":
        header, params = load_checkpoint(stem, kind="critic")
        critic = cls(**header.architecture)
        critic.load_state_dict(params)
        return critic


class LatentAgent:
    """Acts in the true environment through the local model's posterior filter.

    Uses the policy's deterministic mode; ground-truth state is ignored.
    """

    def __init__(self, policy, local_model):
        self.policy = policy
        self.local = local_model
        self._pending = None

    def reset(self, obs: np.ndarray):
        self._pending = None

    def act(self, obs: np.ndarray, state=None) -> np.ndarray:
        obs = np.atleast_2d(obs)
        if self._pending is None:
            latent = self.local.initial(obs)
        else:
            latent = self.local.encode(obs, self._pending)
        action = self.policy.mode(latent.features().data)
        with ad.no_grad():
            self._pending = self.local.transition(latent, action)
        return action[0]
