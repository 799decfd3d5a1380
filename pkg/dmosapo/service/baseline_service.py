import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.core.checkpoint import load_checkpoint, save_checkpoint
from dmosapo.core.exceptions import ConfigValidationError, TrainingDivergedError
from dmosapo.core.optim import Adam, clip_grad_norm
from dmosapo.envs.base import Environment
from dmosapo.envs.play_data import PlayDataset
from dmosapo.models.global_dynamics import GlobalDynamics
from dmosapo.models.policy import Critic, SquashedGaussianPolicy
from dmosapo.models.reward import GlobalReward
from dmosapo.schemas.metrics import EpochMetrics
from dmosapo.service.dmo_service import evaluate_agent, run_dmo, run_epochs
from dmosapo.utils.returns import gae
from dmosapo.utils.seeding import rng_for

logger = logging.getLogger(__name__)


def clipped_surrogate(ratio: Value, advantages: np.ndarray, clip_ratio: float) -> Value:
    """Per-sample min(ρ·A, clip(ρ, 1 − ε, 1 + ε)·A)."""
    advantages = np.asarray(advantages, dtype=np.float64)
    clipped = ad.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    return ad.minimum(ratio * advantages, clipped * advantages)


class ObservationAgent:
    """Acts on normalized observations with the policy's deterministic mode."""

    def __init__(self, policy: SquashedGaussianPolicy, obs_mean: np.ndarray, obs_std: np.ndarray):
        self.policy = policy
        self.obs_mean = np.asarray(obs_mean, dtype=np.float64)
        self.obs_std = np.asarray(obs_std, dtype=np.float64)

    def features(self, obs: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(obs) - self.obs_mean) / self.obs_std

    def reset(self, obs):
        pass

    def act(self, obs, state=None) -> np.ndarray:
        return self.policy.mode(self.features(obs))[0]

    def save(self, stem):
        return save_checkpoint(stem, "obs_normalizer", {"mean": self.obs_mean, "std": self.obs_std}, {})

    @classmethod
    def load(cls, policy: SquashedGaussianPolicy, stem) -> "ObservationAgent":
        _, params = load_checkpoint(stem, kind="obs_normalizer")
        return cls(policy, params["mean"], params["std"])


# ==========================================
# ZEROTH-ORDER BASELINE
# ==========================================

@dataclass
class ZeroOrderState:
    agent: ObservationAgent
    critic: Critic
    global_model: GlobalDynamics
    reward: GlobalReward
    data: PlayDataset
    cfg: object          # ZeroOrderConfig
    hp: object           # HyperParams (discount, prefill length, clipping, skips)
    opt_policy: Adam
    opt_critic: Adam
    rng: np.random.Generator
    epoch: int = 0
    env_samples: int = 0
    wall_ms: float = 0.0
    consecutive_skips: int = 0


def collect_rollouts(state: ZeroOrderState):
    """Batched rollouts in the global model; returns flattened training arrays and stats."""
    cfg, hp, rng = state.cfg, state.hp, state.rng
    policy = state.agent.policy
    windows = np.stack(state.data.sample_windows(
        rng, max(hp.l_init, state.global_model.context_len), cfg.n_rollouts))
    handle = state.global_model.handle(int(rng.integers(2 ** 31))).prefill(windows)
    first = handle.current
    obs = first

    steps, n = cfg.rollout_length, len(windows)
    feats = np.zeros((steps, n, state.agent.obs_mean.shape[0]))
    actions = np.zeros((steps, n, policy.action_dim))
    log_probs = np.zeros((steps, n))
    rewards = np.zeros((steps, n))
    values = np.zeros((steps + 1, n))
    for t in range(steps):
        f = state.agent.features(obs)
        with ad.no_grad():
            action, _ = policy(f, rng.standard_normal((n, policy.action_dim)))
            log_probs[t] = policy.log_prob(f, action.data).data
            values[t] = state.critic(f).data
        features = state.global_model.features(handle.context, action.data) if state.reward.needs_features else None
        nxt = handle.predict(action.data)
        rewards[t] = state.reward.infer(nxt, action.data, first, features)
        feats[t], actions[t] = f, action.data
        obs = nxt
    with ad.no_grad():
        values[steps] = state.critic(state.agent.features(obs)).data

    advantages, returns = gae(rewards, values, hp.gamma, cfg.gae_lambda)
    flat = {
        "features": feats.reshape(steps * n, -1),
        "actions": actions.reshape(steps * n, -1),
        "log_probs": log_probs.reshape(-1),
        "advantages": advantages.reshape(-1),
        "returns": returns.reshape(-1),
    }
    stats = {"return": float(rewards.sum(axis=0).mean()), "entropy": float(-log_probs.mean()), "samples": steps * n}
    return flat, stats


def zeroth_order_epoch(state: ZeroOrderState) -> EpochMetrics:
    """One rollout batch followed by clipped-surrogate updates over minibatches."""
    started = time.perf_counter()
    state.epoch += 1
    cfg, hp = state.cfg, state.hp
    policy, critic = state.agent.policy, state.critic

    batch, stats = collect_rollouts(state)
    adv = batch["advantages"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    policy_losses, critic_losses, norms = [], [], []
    skipped = False
    n = len(adv)
    for _ in range(cfg.update_epochs):
        order = state.rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            idx = order[lo:lo + cfg.minibatch_size]
            f = batch["features"][idx]
            log_prob = policy.log_prob(f, batch["actions"][idx])
            ratio = ad.exp(log_prob - batch["log_probs"][idx])
            loss_pi = -ad.mean(clipped_surrogate(ratio, adv[idx], cfg.clip_ratio))
            if cfg.ent_coef > 0:
                loss_pi = loss_pi + ad.mean(log_prob) * cfg.ent_coef
            err = critic(f) - batch["returns"][idx]
            loss_v = ad.mean(err * err) * cfg.value_coef

            if not (np.isfinite(loss_pi.item()) and np.isfinite(loss_v.item())):
                skipped = True
                continue
            state.opt_policy.zero_grad()
            ad.backward(loss_pi)
            norms.append(clip_grad_norm(policy.parameters(), hp.grad_clip))
            skipped |= not state.opt_policy.step()
            state.opt_critic.zero_grad()
            ad.backward(loss_v)
            clip_grad_norm(critic.parameters(), hp.grad_clip)
            skipped |= not state.opt_critic.step()
            policy_losses.append(loss_pi.item())
            critic_losses.append(loss_v.item())

    if skipped:
        state.consecutive_skips += 1
        logger.warning(f"Zeroth-order epoch {state.epoch}: non-finite update skipped "
                       f"({state.consecutive_skips} consecutive)")
        if state.consecutive_skips >= hp.max_skips:
            logger.error("Aborting zeroth-order baseline after repeated non-finite updates")
            raise TrainingDivergedError("baseline", {"epoch": state.epoch})
    else:
        state.consecutive_skips = 0

    state.env_samples += stats["samples"]
    state.wall_ms += (time.perf_counter() - started) * 1000.0

    def avg(values):
        return float(np.mean(values)) if values else float("nan")

    return EpochMetrics(
        epoch=state.epoch, env_samples=state.env_samples, wall_ms=state.wall_ms,
        imagined_return=stats["return"], policy_loss=avg(policy_losses), critic_loss=avg(critic_losses),
        entropy=stats["entropy"], local_model_loss=float("nan"), grad_norm_theta=avg(norms),
    )


def run_zeroth_order(cfg, env: Environment, data: PlayDataset, global_model: GlobalDynamics,
                     reward: GlobalReward, out_dir):
    """Clipped-surrogate policy gradient on global-model rollouts; returns (agent, critic, metrics)."""
    bcfg, hp, seed = cfg.baseline, cfg.hp, cfg.seed
    init = rng_for(seed, "zeroth_order", "init")
    frames = np.concatenate([ep.observations for ep in data])
    policy = SquashedGaussianPolicy(data.obs_dim, data.action_dim, hp.hidden, seed=int(init.integers(2 ** 31)))
    critic = Critic(data.obs_dim, hp.hidden, seed=int(init.integers(2 ** 31)))
    agent = ObservationAgent(policy, frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-6))
    state = ZeroOrderState(
        agent=agent, critic=critic, global_model=global_model, reward=reward, data=data, cfg=bcfg, hp=hp,
        opt_policy=Adam(policy.parameters(), lr=bcfg.lr), opt_critic=Adam(critic.parameters(), lr=bcfg.lr),
        rng=rng_for(seed, "zeroth_order", "epochs"),
    )
    frame = run_epochs(
        lambda: zeroth_order_epoch(state), bcfg.epochs, out_dir,
        evaluate=lambda epoch: evaluate_agent(env, agent, hp.eval_episodes, seed, epoch),
        eval_every=hp.eval_every, label="zeroth-order",
    )
    out_dir = Path(out_dir)
    policy.save(out_dir / "policy")
    critic.save(out_dir / "critic")
    agent.save(out_dir / "obs_normalizer")
    return agent, critic, frame


# ==========================================
# NO-DIFFUSION ABLATION
# ==========================================

def run_no_diffusion(cfg, env: Environment, data: PlayDataset, reward: GlobalReward, local, out_dir,
                     global_model: Optional[GlobalDynamics] = None):
    """Coupled first-order training: the local model is forward and backward model."""
    if reward.needs_features:
        raise ConfigValidationError("The no-diffusion baseline needs a reward that does not read global features")
    return run_dmo(cfg, env, data, global_model, reward, local, out_dir, coupled=True)
