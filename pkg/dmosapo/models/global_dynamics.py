"""
Global forward models f→. Rollouts from these models are generated under
``no_grad`` and handed out as plain arrays; nothing downstream can backpropagate
into their parameters.

All variants predict the next observation from a window of ``context_len`` past
observations and an action, and are driven through a ``RolloutHandle`` whose
context is prefilled with real frames.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.checkpoint import load_checkpoint, save_checkpoint
from dmosapo.core.exceptions import ContextTooShortError, UnknownComponentError
from dmosapo.envs.base import Environment
from dmosapo.models.nn import MLP, Module

logger = logging.getLogger(__name__)


# ==========================================
# NOISE SCHEDULE & PRECONDITIONING
# ==========================================

def karras_sigmas(n_steps: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> np.ndarray:
    """Descending noise levels with a terminal 0; ``n_steps=1`` gives ``[sigma_max, 0]``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps == 1:
        return np.array([sigma_max, 0.0])
    ramp = np.linspace(0.0, 1.0, n_steps)
    inv_rho = 1.0 / rho
    sigmas = (sigma_max ** inv_rho + ramp * (sigma_min ** inv_rho - sigma_max ** inv_rho)) ** rho
    return np.append(sigmas, 0.0)


def edm_coefficients(sigma: np.ndarray, sigma_data: float):
    """(c_skip, c_out, c_in, c_noise) of the EDM preconditioner."""
    sigma = np.asarray(sigma, dtype=np.float64)
    total = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


# ==========================================
# BASE CLASS
# ==========================================

class GlobalDynamics(Module):
    variant = "base"

    def __init__(self, obs_dim: int, action_dim: int, context_len: int):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.context_len = context_len
        self.trained_epochs = 0
        self.obs_mean = np.zeros(obs_dim)
        self.obs_std = np.ones(obs_dim)
        self.delta_mean = np.zeros(obs_dim)
        self.delta_std = np.ones(obs_dim)

    @property
    def is_untrained(self) -> bool:
        return self.trained_epochs == 0

    def fit_normalizers(self, observations: np.ndarray, deltas: np.ndarray):
        self.obs_mean = observations.mean(axis=0)
        self.obs_std = np.maximum(observations.std(axis=0), 1e-6)
        self.delta_mean = deltas.mean(axis=0)
        self.delta_std = np.maximum(deltas.std(axis=0), 1e-6)

    def _check_context(self, context: np.ndarray) -> np.ndarray:
        context = np.asarray(context, dtype=np.float64)
        if context.ndim == 2:
            context = context[None]
        if context.shape[1] < self.context_len:
            raise ContextTooShortError(self.context_len, context.shape[1])
        return context[:, -self.context_len:]

    def conditioning(self, context: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Normalized flattened context concatenated with the action."""
        norm = (context - self.obs_mean) / self.obs_std
        return np.concatenate([norm.reshape(len(norm), -1), np.atleast_2d(action)], axis=1)

    def predict(self, context: np.ndarray, action: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Next observation(s); ``context`` is (context_len, obs) or (B, context_len, obs)."""
        single = np.asarray(context).ndim == 2
        context = self._check_context(context)
        action = np.atleast_2d(np.asarray(action, dtype=np.float64))
        with ad.no_grad():
            out = self._predict(context, action, rng)
        return out[0] if single else out

    def _predict(self, context, action, rng) -> np.ndarray:
        raise NotImplementedError

    def uncertainty(self, context: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Epistemic std per sample; zero for single-model variants."""
        return np.zeros(len(self._check_context(context)))

    def features(self, context: np.ndarray, action: np.ndarray) -> Optional[np.ndarray]:
        """Internal conditioning features, if the variant has any."""
        return None

    def handle(self, seed: int = 0) -> "RolloutHandle":
        return RolloutHandle(self, np.random.default_rng(seed))

    # ── checkpointing ───────────────────────────────────────────

    def architecture(self) -> dict:
        return {"variant": self.variant, "obs_dim": self.obs_dim,
                "action_dim": self.action_dim, "context_len": self.context_len}

    def extra(self) -> dict:
        return {
            "trained_epochs": self.trained_epochs,
            "obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist(),
            "delta_mean": self.delta_mean.tolist(), "delta_std": self.delta_std.tolist(),
        }

    def load_extra(self, extra: dict):
        self.trained_epochs = int(extra.get("trained_epochs", 0))
        for key in ("obs_mean", "obs_std", "delta_mean", "delta_std"):
            if key in extra:
                setattr(self, key, np.asarray(extra[key], dtype=np.float64))

    def save(self, stem) -> Path:
        return save_checkpoint(stem, "global_dynamics", self.state_dict(), self.architecture(), self.extra())


# ==========================================
# ENSEMBLE
# ==========================================

class EnsembleDynamics(GlobalDynamics):
    """M independent MLPs regressing the normalized observation delta."""

    variant = "ensemble"

    def __init__(self, obs_dim: int, action_dim: int, context_len: int,
                 n_members: int = 5, hidden: int = 128, seeds: Optional[List[int]] = None):
        super().__init__(obs_dim, action_dim, context_len)
        seeds = seeds if seeds is not None else list(range(n_members))
        n_in = context_len * obs_dim + action_dim
        self.hidden = hidden
        self.members = [
            MLP([n_in, hidden, hidden, obs_dim], np.random.default_rng(s), out_scale=0.1)
            for s in seeds[:n_members]
        ]

    def member_deltas(self, context: np.ndarray, action: np.ndarray) -> np.ndarray:
        x = self.conditioning(context, action)
        return np.stack([m(x).data for m in self.members])   # (M, B, obs)

    def _predict(self, context, action, rng):
        delta = self.member_deltas(context, action).mean(axis=0)
        return context[:, -1] + delta * self.delta_std + self.delta_mean

    def member_loss(self, index: int, cond: np.ndarray, target: np.ndarray) -> ad.Value:
        err = self.members[index](cond) - target
        return ad.mean(err * err)

    def uncertainty(self, context, action):
        context = self._check_context(context)
        with ad.no_grad():
            deltas = self.member_deltas(context, np.atleast_2d(action)) * self.delta_std
        return deltas.std(axis=0).mean(axis=-1)

    def architecture(self):
        return {**super().architecture(), "n_members": len(self.members), "hidden": self.hidden}


# ==========================================
# FEW-STEP DENOISER
# ==========================================

class DenoiserDynamics(GlobalDynamics):
    """Conditional EDM denoiser over the normalized next-observation delta.

    A context encoder maps (context, action) to features; the denoiser network
    sees ``c_in * x``, ``c_noise`` and those features.
    """

    variant = "denoiser"

    def __init__(self, obs_dim: int, action_dim: int, context_len: int,
                 hidden: int = 128, feature_dim: int = 64, denoise_steps: int = 3,
                 sigma_min: float = 0.002, sigma_max: float = 5.0, rho: float = 7.0,
                 seed: int = 0):
        super().__init__(obs_dim, action_dim, context_len)
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.denoise_steps = denoise_steps
        self.sigma_min, self.sigma_max, self.rho = sigma_min, sigma_max, rho
        self.sigma_data = 1.0
        self.context_net = MLP([context_len * obs_dim + action_dim, hidden, feature_dim], rng)
        self.denoise_net = MLP([obs_dim + 1 + feature_dim, hidden, hidden, obs_dim], rng, out_scale=0.1)

    @property
    def schedule(self) -> np.ndarray:
        return karras_sigmas(self.denoise_steps, self.sigma_min * self.sigma_data,
                             self.sigma_max * self.sigma_data, self.rho)

    def encode_context(self, cond) -> ad.Value:
        return ad.tanh(self.context_net(cond))

    def denoise(self, x, sigma: np.ndarray, feats) -> ad.Value:
        """D(x; sigma) = c_skip x + c_out F(c_in x, c_noise, features)."""
        sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
        c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, self.sigma_data)
        x = ad.as_value(x)
        noise_col = np.broadcast_to(c_noise, (x.shape[0], 1))
        raw = self.denoise_net(ad.concat([x * c_in, noise_col, feats], axis=-1))
        return x * c_skip + raw * c_out

    def training_sigmas(self, batch: int, rng: np.random.Generator, p_mean: float = -0.4,
                        p_std: float = 1.2, schedule_mix: float = 0.5) -> np.ndarray:
        """Log-normal noise levels, with a ``schedule_mix`` share replaced by the
        sampler's own nonzero levels so every Euler step is evaluated where it was fit."""
        sigma = np.exp(p_mean + p_std * rng.standard_normal(batch)) * self.sigma_data
        levels = self.schedule[:-1]
        on_schedule = rng.random(batch) < schedule_mix
        sigma[on_schedule] = levels[rng.integers(len(levels), size=int(on_schedule.sum()))]
        return sigma

    def denoising_loss(self, cond: np.ndarray, target: np.ndarray, rng: np.random.Generator,
                       p_mean: float = -0.4, p_std: float = 1.2, schedule_mix: float = 0.5) -> ad.Value:
        """EDM-weighted denoising loss.

        Written in terms of the raw network output: the weighted error on D equals the
        plain error of F against ``(x0 - c_skip * x) / c_out``.
        """
        sigma = self.training_sigmas(len(target), rng, p_mean, p_std, schedule_mix)
        noisy = target + sigma[:, None] * rng.standard_normal(target.shape)
        c_skip, c_out, c_in, c_noise = edm_coefficients(sigma[:, None], self.sigma_data)
        feats = self.encode_context(cond)
        raw = self.denoise_net(ad.concat([noisy * c_in, c_noise, feats], axis=-1))
        err = raw - (target - c_skip * noisy) / c_out
        return ad.mean(err * err)

    def sample(self, feats, rng: np.random.Generator) -> np.ndarray:
        """Deterministic Euler sampling from pure noise through the schedule."""
        sigmas = self.schedule
        batch = feats.shape[0]
        x = sigmas[0] * rng.standard_normal((batch, self.obs_dim))
        for s_cur, s_next in zip(sigmas[:-1], sigmas[1:]):
            denoised = self.denoise(x, np.full(batch, s_cur), feats).data
            x = x + (s_next - s_cur) * (x - denoised) / s_cur
        return x

    def _predict(self, context, action, rng):
        rng = rng if rng is not None else np.random.default_rng(0)
        feats = self.encode_context(self.conditioning(context, action))
        delta = self.sample(feats, rng)
        return context[:, -1] + delta * self.delta_std + self.delta_mean

    def features(self, context, action):
        context = self._check_context(context)
        with ad.no_grad():
            return self.encode_context(self.conditioning(context, np.atleast_2d(action))).data

    def architecture(self):
        return {
            **super().architecture(), "hidden": self.hidden, "feature_dim": self.feature_dim,
            "denoise_steps": self.denoise_steps, "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max, "rho": self.rho,
        }

    def extra(self):
        return {**super().extra(), "sigma_data": self.sigma_data, "schedule": self.schedule.tolist()}

    def load_extra(self, extra):
        super().load_extra(extra)
        self.sigma_data = float(extra.get("sigma_data", 1.0))


# ==========================================
# TRUE-SIMULATOR ORACLE
# ==========================================

class SimulatorDynamics(GlobalDynamics):
    """Steps the ground-truth environment; oracle wiring for state observations only."""

    variant = "simulator"

    def __init__(self, env: Environment):
        super().__init__(env.obs_dim, env.action_dim, context_len=1)
        self.env = env
        self.trained_epochs = 1

    def _predict(self, context, action, rng):
        out = []
        for frame, a in zip(context[:, -1], action):
            state = self.env.state_from_observation(frame)
            out.append(self.env.observe(self.env.step(state, a)))
        return np.asarray(out)

    def save(self, stem):
        raise NotImplementedError("Simulator dynamics have no parameters to save")


# ==========================================
# ROLLOUT HANDLE
# ==========================================

class RolloutHandle:
    """Stateful batched rollout: keeps the last ``context_len`` frames per sample."""

    def __init__(self, model: GlobalDynamics, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        self.context: Optional[np.ndarray] = None
        self.steps = 0

    def prefill(self, window: np.ndarray) -> "RolloutHandle":
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 2:
            window = window[None]
        if window.shape[1] < self.model.context_len:
            raise ContextTooShortError(self.model.context_len, window.shape[1])
        self.context = window[:, -self.model.context_len:].copy()
        self.steps = 0
        return self

    @property
    def current(self) -> np.ndarray:
        return self.context[:, -1].copy()

    def predict(self, action: np.ndarray) -> np.ndarray:
        if self.context is None:
            raise ContextTooShortError(self.model.context_len, 0)
        action = np.atleast_2d(np.asarray(action, dtype=np.float64))
        nxt = self.model.predict(self.context, action, self.rng)
        self.context = np.concatenate([self.context[:, 1:], nxt[:, None]], axis=1)
        self.steps += 1
        return nxt

    def uncertainty(self, action: np.ndarray) -> np.ndarray:
        return self.model.uncertainty(self.context, action)


def prefill_context(model: GlobalDynamics, history: np.ndarray, seed: int = 0) -> RolloutHandle:
    return model.handle(seed).prefill(history)


# ==========================================
# FACTORY & LOADING
# ==========================================

def build_global(cfg, obs_dim: int, action_dim: int, seed: int = 0, env: Optional[Environment] = None) -> GlobalDynamics:
    variant = getattr(cfg.variant, "value", cfg.variant)
    if variant == "ensemble":
        seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(cfg.n_members)]
        return EnsembleDynamics(obs_dim, action_dim, cfg.context_len, cfg.n_members, cfg.hidden, seeds)
    if variant == "denoiser":
        return DenoiserDynamics(obs_dim, action_dim, cfg.context_len, cfg.hidden, cfg.feature_dim,
                                cfg.denoise_steps, cfg.sigma_min, cfg.sigma_max, cfg.rho, seed)
    if variant == "simulator":
        if env is None:
            raise ValueError("Simulator dynamics need the environment")
        return SimulatorDynamics(env)
    raise UnknownComponentError("global model variant", variant, ["ensemble", "denoiser", "simulator"])


def load_global(stem) -> GlobalDynamics:
    header, params = load_checkpoint(stem, kind="global_dynamics")
    arch: Dict = dict(header.architecture)
    variant = arch.pop("variant")
    if variant == "ensemble":
        model = EnsembleDynamics(**arch)
    elif variant == "denoiser":
        model = DenoiserDynamics(**arch)
    else:
        raise UnknownComponentError("global model variant", variant, ["ensemble", "denoiser"])
    model.load_state_dict(params)
    model.load_extra(header.extra)
    if model.is_untrained:
        logger.warning(f"Global model at {stem} is untrained (zero epochs)")
    return model
