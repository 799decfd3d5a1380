"""
Local backward model f←: encoder, single-step recurrent latent dynamics and a
reward head.

Latent transition (prior):      h' = cell(h, [z, a]),   z' ~ N(prior(h'))
Posterior (encoder):            z  ~ N(encoder([o, h]))
Reward head:                    r̂  = R([h', z', a])

The encoder is evaluated under ``no_grad`` whenever it produces anchor values,
so policy gradients never reach its parameters. Training losses are single-step:
every loss evaluation runs the transition exactly once.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Tuple

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.core.checkpoint import load_checkpoint, save_checkpoint
from dmosapo.core.exceptions import UnrollLimitError
from dmosapo.models.nn import MLP, GRUCell, LinearCell, Module

logger = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class Latent:
    h: Value     # (B, h_dim) deterministic state
    z: Value     # (B, z_dim) stochastic state; may have zero width

    def features(self) -> Value:
        return ad.concat([self.h, self.z], axis=-1)

    def detach(self) -> "Latent":
        return Latent(ad.stop_gradient(self.h), ad.stop_gradient(self.z))

    def numpy(self) -> np.ndarray:
        return np.concatenate([self.h.data, self.z.data], axis=-1)

    @property
    def batch(self) -> int:
        return self.h.shape[0]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.h.data)) and np.all(np.isfinite(self.z.data)))


def anchor_latent(forward: Latent, local: Latent) -> Latent:
    """Component-wise decoupled anchor: values of ``forward``, gradients of ``local``."""
    return Latent(ad.decoupled_anchor(forward.h, local.h), ad.decoupled_anchor(forward.z, local.z))


class BackwardModel(Protocol):
    """What imagination needs from a backward model."""

    feature_dim: int
    noise_dim: int

    def initial(self, obs: np.ndarray, eps: Optional[np.ndarray] = None) -> Latent: ...

    def transition(self, latent: Latent, action: Value, eps: Optional[np.ndarray] = None) -> Latent: ...

    def encode(self, obs: np.ndarray, context: Latent, eps: Optional[np.ndarray] = None) -> Latent: ...

    def reward(self, latent: Latent, action: Value) -> Value: ...

    def decode(self, latent: Latent) -> np.ndarray: ...


def gaussian_kl(mu_q, ls_q, mu_p, ls_p) -> Value:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    var_q = ad.exp(ls_q * 2.0)
    var_p = ad.exp(ls_p * 2.0)
    diff = mu_q - mu_p
    per_dim = ls_p - ls_q + (var_q + diff * diff) / (var_p * 2.0) - 0.5
    return ad.vsum(per_dim, axis=-1)


class LocalWorldModel(Module):
    def __init__(self, obs_dim: int, action_dim: int, h_dim: int = 64, z_dim: int = 16,
                 hidden: int = 128, cell: str = "gru", seed: int = 0):
        rng = np.random.default_rng(seed)
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.h_dim, self.z_dim, self.hidden, self.cell_kind = h_dim, z_dim, hidden, cell
        self.encoder = MLP([obs_dim + h_dim, hidden, 2 * z_dim], rng)
        if cell == "gru":
            self.cell = GRUCell(z_dim + action_dim, h_dim, rng)
        elif cell == "linear":
            self.cell = LinearCell(z_dim + action_dim, h_dim, rng, n_action=action_dim)
        else:
            raise ValueError(f"Unknown cell '{cell}'")
        self.prior = MLP([h_dim, hidden, 2 * z_dim], rng)
        self.decoder = MLP([h_dim + z_dim, hidden, obs_dim], rng)
        self.reward_head = MLP([h_dim + z_dim + action_dim, hidden, 1], rng)
        self.obs_mean = np.zeros(obs_dim)
        self.obs_std = np.ones(obs_dim)
        self.trained_steps = 0
        self.last_loss_unroll = 0
        self._unroll_count = 0

    @property
    def feature_dim(self) -> int:
        return self.h_dim + self.z_dim

    @property
    def noise_dim(self) -> int:
        return self.z_dim

    def encoder_parameters(self):
        return self.encoder.parameters()

    def non_encoder_parameters(self):
        enc = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    # ── distributions ───────────────────────────────────────────

    def _split_stats(self, out: Value) -> Tuple[Value, Value]:
        mu = out[..., : self.z_dim]
        log_std = ad.clip(out[..., self.z_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def posterior_stats(self, obs: np.ndarray, h) -> Tuple[Value, Value]:
        norm = (np.atleast_2d(obs) - self.obs_mean) / self.obs_std
        return self._split_stats(self.encoder(ad.concat([norm, h], axis=-1)))

    def prior_stats(self, h) -> Tuple[Value, Value]:
        return self._split_stats(self.prior(h))

    @staticmethod
    def _sample(mu: Value, log_std: Value, eps: Optional[np.ndarray]) -> Value:
        if eps is None:
            return mu
        return ad.gaussian_sample(mu, log_std, eps)

    # ── backward-model protocol ─────────────────────────────────

    def initial(self, obs: np.ndarray, eps: Optional[np.ndarray] = None) -> Latent:
        """Posterior latent of a first frame with an all-zero recurrent context."""
        obs = np.atleast_2d(obs)
        return self.encode(obs, Latent(Value(np.zeros((len(obs), self.h_dim))),
                                       Value(np.zeros((len(obs), self.z_dim)))), eps)

    def encode(self, obs: np.ndarray, context: Latent, eps: Optional[np.ndarray] = None) -> Latent:
        """Gradient-free posterior at ``obs`` given the recurrent state of ``context``."""
        with ad.no_grad():
            h = Value(context.h.data.copy())
            mu, log_std = self.posterior_stats(obs, h)
            z = self._sample(mu, log_std, eps)
        return Latent(h, Value(z.data))

    def transition(self, latent: Latent, action, eps: Optional[np.ndarray] = None) -> Latent:
        self._unroll_count += 1
        h_next = self.cell(ad.concat([latent.z, ad.as_value(action)], axis=-1), latent.h)
        mu, log_std = self.prior_stats(h_next)
        return Latent(h_next, self._sample(mu, log_std, eps))

    def reward(self, latent: Latent, action) -> Value:
        out = self.reward_head(ad.concat([latent.features(), ad.as_value(action)], axis=-1))
        return ad.reshape(out, (latent.batch,))

    def decode(self, latent: Latent) -> np.ndarray:
        """Decoder mean in observation units, gradient-free."""
        with ad.no_grad():
            out = self.decoder(latent.features()).data
        return out * self.obs_std + self.obs_mean

    def local_step(self, latent: Latent, action, eps: Optional[np.ndarray] = None) -> Tuple[Latent, Value]:
        nxt = self.transition(latent, action, eps)
        return nxt, self.reward(nxt, action)

    # ── filtering & training ────────────────────────────────────

    def filter_episode(self, observations: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior-mean latents (h, z) for every frame of a recorded episode, no gradients."""
        hs, zs = [], []
        with ad.no_grad():
            latent = self.initial(observations[:1])
            hs.append(latent.h.data[0])
            zs.append(latent.z.data[0])
            for t, a in enumerate(actions):
                h_next = self.cell(ad.concat([latent.z, Value(a[None])], axis=-1), latent.h)
                latent = self.encode(observations[t + 1:t + 2], Latent(h_next, latent.z))
                hs.append(latent.h.data[0])
                zs.append(latent.z.data[0])
        return np.asarray(hs), np.asarray(zs)

    def single_step_loss(self, h: np.ndarray, obs: np.ndarray, action: np.ndarray, next_obs: np.ndarray,
                         reward_target: np.ndarray, eps: np.ndarray, free_bits: float = 1.0,
                         kl_scale: float = 1.0, recon_scale: float = 1.0, reward_scale: float = 1.0):
        """Reconstruction + free-bits KL + reward regression for one transition per sample.

        Returns (total loss, parts dict of floats, per-sample KL array).
        """
        self._unroll_count = 0
        h = Value(np.atleast_2d(h))
        mu_q0, ls_q0 = self.posterior_stats(obs, h)
        z = ad.gaussian_sample(mu_q0, ls_q0, eps[0])
        prior_latent = self.transition(Latent(h, z), action)
        mu_p, ls_p = self.prior_stats(prior_latent.h)
        mu_q, ls_q = self.posterior_stats(next_obs, prior_latent.h)
        z_next = ad.gaussian_sample(mu_q, ls_q, eps[1])
        posterior = Latent(prior_latent.h, z_next)

        target = (np.atleast_2d(next_obs) - self.obs_mean) / self.obs_std
        err = self.decoder(posterior.features()) - target
        recon = ad.mean(ad.vsum(err * err, axis=-1))
        kl = gaussian_kl(mu_q, ls_q, mu_p, ls_p)
        kl_loss = ad.mean(ad.maximum(kl, np.full(kl.shape, free_bits)))
        r_err = self.reward(posterior, action) - np.asarray(reward_target, dtype=np.float64)
        reward_loss = ad.mean(r_err * r_err)
        total = recon * recon_scale + kl_loss * kl_scale + reward_loss * reward_scale

        self.last_loss_unroll = self._unroll_count
        if self.last_loss_unroll != 1:
            raise UnrollLimitError(self.last_loss_unroll)
        parts = {"recon": recon.item(), "kl": ad.mean(kl).item(), "reward": reward_loss.item()}
        return total, parts, kl.data

    def reconstruct(self, obs: np.ndarray, h: np.ndarray) -> np.ndarray:
        """decoder(encode(o)) in observation units."""
        with ad.no_grad():
            h = Value(np.atleast_2d(h))
            mu, _ = self.posterior_stats(obs, h)
            out = self.decoder(ad.concat([h, mu], axis=-1)).data
        return out * self.obs_std + self.obs_mean

    # ── checkpointing ───────────────────────────────────────────

    def save(self, stem) -> Path:
        arch = {"obs_dim": self.obs_dim, "action_dim": self.action_dim, "h_dim": self.h_dim,
                "z_dim": self.z_dim, "hidden": self.hidden, "cell": self.cell_kind}
        extra = {"obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist(),
                 "trained_steps": self.trained_steps}
        return save_checkpoint(stem, "local_model", self.state_dict(), arch, extra)

    @classmethod
    def load(cls, stem) -> "LocalWorldModel":
        header, params = load_checkpoint(stem, kind="local_model")
        model = cls(**header.architecture)
        model.load_state_dict(params)
        model.obs_mean = np.asarray(header.extra["obs_mean"])
        model.obs_std = np.asarray(header.extra["obs_std"])
        model.trained_steps = int(header.extra.get("trained_steps", 0))
        return model
