"""
Policy optimization inside the learned models.

Each epoch finetunes the local model on recent rollouts, imagines a batch of
trajectories, and applies one policy update and one critic update. In an
imagined trajectory the global model supplies every observation (no gradient)
and the local model supplies every Jacobian: each latent is anchored so that
its value is the posterior of the global observation while its gradient flows
through the local transition.
"""

import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.core.exceptions import (
    ConfigValidationError,
    GradientLeakError,
    NonFiniteLatentError,
    TrainingDivergedError,
)
from dmosapo.core.optim import Adam, clip_grad_norm
from dmosapo.envs.base import Environment
from dmosapo.envs.evaluation import rollout_eval, success_rate
from dmosapo.envs.play_data import PlayDataset
from dmosapo.models.global_dynamics import GlobalDynamics
from dmosapo.models.local import Latent, anchor_latent
from dmosapo.models.nn import Module
from dmosapo.models.policy import Critic, LatentAgent, SquashedGaussianPolicy
from dmosapo.models.reward import GlobalReward
from dmosapo.schemas.metrics import EVAL_COLUMNS, METRIC_COLUMNS, EpochMetrics, EvalMetrics
from dmosapo.service.local_service import build_local_set, finetune_local, local_optimizer, reward_targets
from dmosapo.utils.metrics import CsvLog
from dmosapo.utils.replay import ReplayBuffer, TransitionBatch
from dmosapo.utils.returns import lambda_returns
from dmosapo.utils.seeding import rng_for

logger = logging.getLogger(__name__)


# ==========================================
# IMAGINATION
# ==========================================

@dataclass
class ImaginedTrajectory:
    observations: np.ndarray            # (H + 1, B, obs_dim), gradient-free
    latents: List[Latent]               # l_1..l_{H+1}
    actions: List[Value]                # a_1..a_H
    global_rewards: np.ndarray          # (H, B) r_1..r_H, gradient-free
    local_rewards: List[Value]          # R̂_1..R̂_H, each (B,)
    entropies: List[Value]              # 𝓗_1..𝓗_H, each (B,)
    anchored: bool = True

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def batch(self) -> int:
        return self.observations.shape[1]

    def transitions(self) -> TransitionBatch:
        """Flatten (l_h, o_h, a_h, o_{h+1}, r_h) for the replay buffer."""
        obs_dim = self.observations.shape[-1]
        return TransitionBatch(
            h=np.concatenate([l.h.data for l in self.latents[:-1]]),
            obs=self.observations[:-1].reshape(-1, obs_dim),
            action=np.concatenate([a.data for a in self.actions]),
            next_obs=self.observations[1:].reshape(-1, obs_dim),
            reward=self.global_rewards.reshape(-1),
        )


def imagine(policy, global_model: Optional[GlobalDynamics], local, start_windows: np.ndarray, hp,
            rng: np.random.Generator, reward: Optional[GlobalReward] = None,
            coupled: bool = False) -> ImaginedTrajectory:
    """Roll out ``policy`` for ``hp.horizon`` steps from real observation windows.

    With ``coupled=True`` the local model is both forward and backward model:
    no global model is consulted and no anchor is placed on the tape.
    """
    windows = np.asarray(start_windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    batch, horizon = len(windows), hp.horizon
    first_obs = windows[:, -1].copy()

    handle = None
    if not coupled:
        if global_model is None:
            raise ConfigValidationError("Decoupled imagination needs a global model")
        handle = global_model.handle(int(rng.integers(2 ** 31))).prefill(windows)
    if coupled and reward is not None and reward.needs_features:
        raise ConfigValidationError("A reward that reads global-model features cannot drive a coupled rollout")

    eps_action = rng.standard_normal((horizon, batch, policy.action_dim))
    eps_prior = rng.standard_normal((horizon, batch, local.noise_dim))
    eps_post = rng.standard_normal((horizon + 1, batch, local.noise_dim))

    latent = local.initial(first_obs, eps_post[0])
    observations, latents = [first_obs], [latent]
    actions, entropies, local_rewards, global_rewards = [], [], [], []
    for step in range(horizon):
        action, entropy = policy(latent.features(), eps_action[step])
        action_data = action.data.copy()

        local_next = local.transition(latent, action, eps_prior[step])
        if coupled:
            next_latent = local_next
            next_obs = local.decode(local_next)
            features = None
        else:
            features = global_model.features(handle.context, action_data) if (
                reward is not None and reward.needs_features) else None
            next_obs = handle.predict(action_data)
            encoded = local.encode(next_obs, local_next, eps_post[step + 1])
            next_latent = anchor_latent(encoded, local_next)

        if not next_latent.is_finite():
            logger.error(f"Imagination produced a non-finite latent at step {step + 1}")
            raise NonFiniteLatentError(step + 1)
        if hp.truncate_bptt and (step + 1) % hp.truncate_bptt == 0:
            next_latent = next_latent.detach()

        if reward is not None:
            global_rewards.append(reward.infer(next_obs, action_data, first_obs, features))
        else:
            global_rewards.append(np.zeros(batch))
        local_rewards.append(local.reward(next_latent, action))
        actions.append(action)
        entropies.append(entropy)
        observations.append(np.asarray(next_obs, dtype=np.float64))
        latents.append(next_latent)
        latent = next_latent

    return ImaginedTrajectory(
        observations=np.stack(observations),
        latents=latents,
        actions=actions,
        global_rewards=np.stack(global_rewards),
        local_rewards=local_rewards,
        entropies=entropies,
        anchored=not coupled,
    )


# ==========================================
# LOSSES
# ==========================================

def _frozen(module):
    return module.frozen() if isinstance(module, Module) else nullcontext()


def sapo_policy_loss(traj: ImaginedTrajectory, critic, hp) -> Value:
    """−[Σ_{h=1}^{H−1} γ^h (R̂_h + α 𝓗_h) + γ^H V(l_H)], batch-averaged.

    The critic is a constant here; its bootstrap still passes gradient into l_H.
    """
    horizon = traj.horizon
    objective = None
    for h in range(1, horizon):
        term = ad.mean(traj.local_rewards[h - 1] + traj.entropies[h - 1] * hp.alpha) * hp.gamma ** h
        objective = term if objective is None else objective + term
    with _frozen(critic):
        bootstrap = ad.mean(critic(traj.latents[horizon - 1].features())) * hp.gamma ** horizon
    objective = bootstrap if objective is None else objective + bootstrap
    return -objective


def critic_targets(traj: ImaginedTrajectory, critic, hp) -> np.ndarray:
    """λ-targets V̂_1..V̂_{H−1} from the global rewards and current critic values V_1..V_H."""
    horizon = traj.horizon
    with ad.no_grad():
        values = np.stack([critic(traj.latents[h].features()).data for h in range(horizon)])
    return lambda_returns(traj.global_rewards[: horizon - 1], values, hp.gamma, hp.lam)


def critic_loss(traj: ImaginedTrajectory, critic, targets: np.ndarray) -> Value:
    """Σ_h (V(l_h) − V̂_h)² averaged over the batch; latents and targets are constants."""
    total = Value(0.0)
    for h in range(len(targets)):
        err = critic(traj.latents[h].detach().features()) - np.asarray(targets[h])
        total = total + ad.mean(err * err)
    return total


# ==========================================
# TRAINING STATE & EPOCH
# ==========================================

@dataclass
class TrainState:
    policy: Module
    critic: Module
    local: Module
    global_model: Optional[GlobalDynamics]
    reward: Optional[GlobalReward]
    data: PlayDataset
    hp: object
    local_cfg: object
    opt_policy: Adam
    opt_critic: Adam
    opt_local: Optional[Adam]
    buffer: ReplayBuffer
    rng: np.random.Generator
    play_set: Optional[TransitionBatch] = None
    coupled: bool = False
    epoch: int = 0
    env_samples: int = 0
    wall_ms: float = 0.0
    consecutive_skips: int = 0
    history: List[EpochMetrics] = field(default_factory=list)


def build_train_state(policy, critic, local, global_model, reward, data: PlayDataset, hp, local_cfg,
                      seed: int, play_set: Optional[TransitionBatch] = None, coupled: bool = False) -> TrainState:
    opt_local = local_optimizer(local, local_cfg, hp.lr_local) if hasattr(local, "single_step_loss") else None
    return TrainState(
        policy=policy, critic=critic, local=local, global_model=global_model, reward=reward,
        data=data, hp=hp, local_cfg=local_cfg,
        opt_policy=Adam(policy.parameters(), lr=hp.lr_policy),
        opt_critic=Adam(critic.parameters(), lr=hp.lr_critic),
        opt_local=opt_local,
        buffer=ReplayBuffer(hp.buffer_capacity),
        rng=rng_for(seed, "train", "epochs"),
        play_set=play_set,
        coupled=coupled,
    )


def assert_gradient_free(state: TrainState):
    """Global model and global reward parameters never hold a gradient."""
    modules = [state.global_model]
    if state.reward is not None:
        modules += [state.reward.energy, state.reward.intent]
    for module in modules:
        if isinstance(module, Module) and any(p.has_grad for p in module.parameters()):
            raise GradientLeakError(type(module).__name__)


def _register_skip(state: TrainState, reason: str):
    state.consecutive_skips += 1
    logger.warning(f"Epoch {state.epoch}: update skipped ({reason}); "
                   f"{state.consecutive_skips} consecutive skip(s)")
    if state.consecutive_skips >= state.hp.max_skips:
        logger.error(f"Aborting after {state.consecutive_skips} consecutive skipped updates")
        raise TrainingDivergedError("train-policy", {"epoch": state.epoch, "reason": reason})


def _step(opt: Adam, loss: Value, params, max_norm) -> Tuple[bool, float]:
    opt.zero_grad()
    if loss.tracked:
        ad.backward(loss)
    norm = clip_grad_norm(params, max_norm)
    return opt.step(), norm


def train_epoch(state: TrainState) -> EpochMetrics:
    """Model mini-epochs, one batch of imaginations, one policy and one critic update."""
    hp = state.hp
    started = time.perf_counter()
    state.epoch += 1

    local_loss = float("nan")
    if state.opt_local is not None and len(state.buffer) and hp.model_mini_epochs:
        local_loss = finetune_local(state.local, state.opt_local, state.buffer, state.play_set,
                                    state.local_cfg, state.rng, steps=hp.model_mini_epochs)

    context_len = state.global_model.context_len if state.global_model is not None else 1
    windows = np.stack(state.data.sample_windows(state.rng, max(hp.l_init, context_len), hp.batch_size))

    policy_value = critic_value = grad_norm = entropy = imagined_return = float("nan")
    try:
        with _frozen(state.local):
            traj = imagine(state.policy, state.global_model, state.local, windows, hp, state.rng,
                           reward=state.reward, coupled=state.coupled)
            loss_pi = sapo_policy_loss(traj, state.critic, hp)
    except NonFiniteLatentError as e:
        _register_skip(state, e.detail)
        traj = None

    if traj is not None:
        policy_value = loss_pi.item()
        entropy = float(np.mean([e.data for e in traj.entropies]))
        imagined_return = float(np.mean(traj.global_rewards.sum(axis=0)))
        stepped = False
        if np.isfinite(policy_value):
            stepped, grad_norm = _step(state.opt_policy, loss_pi, state.policy.parameters(), hp.grad_clip)

        targets = critic_targets(traj, state.critic, hp)
        loss_v = critic_loss(traj, state.critic, targets)
        critic_value = loss_v.item()
        if np.isfinite(critic_value):
            _step(state.opt_critic, loss_v, state.critic.parameters(), hp.grad_clip)

        if stepped and np.isfinite(critic_value):
            state.consecutive_skips = 0
        else:
            _register_skip(state, f"policy loss {policy_value}, critic loss {critic_value}")
        if np.all(np.isfinite(traj.global_rewards)):
            state.buffer.add(traj.transitions())
        state.env_samples += traj.horizon * traj.batch
        assert_gradient_free(state)

    state.wall_ms += (time.perf_counter() - started) * 1000.0
    row = EpochMetrics(
        epoch=state.epoch, env_samples=state.env_samples, wall_ms=state.wall_ms,
        imagined_return=imagined_return, policy_loss=policy_value, critic_loss=critic_value,
        entropy=entropy, local_model_loss=local_loss, grad_norm_theta=grad_norm,
    )
    state.history.append(row)
    return row


# ==========================================
# TRAINING LOOP
# ==========================================

def run_epochs(epoch_fn: Callable[[], EpochMetrics], n_epochs: int, out_dir,
               evaluate: Optional[Callable[[int], Tuple[float, float]]] = None,
               eval_every: int = 0, label: str = "dmo") -> pd.DataFrame:
    """Drive ``epoch_fn`` and append rows to metrics.csv (and eval.csv when evaluating)."""
    out_dir = Path(out_dir)
    metrics_log = CsvLog(out_dir / "metrics.csv", METRIC_COLUMNS).start()
    eval_log = CsvLog(out_dir / "eval.csv", EVAL_COLUMNS).start() if evaluate and eval_every else None

    for _ in range(n_epochs):
        row = epoch_fn()
        metrics_log.append(row)
        logger.info(
            f"[{label}] epoch {row.epoch}: return {row.imagined_return:.3f}, "
            f"policy loss {row.policy_loss:.4f}, critic loss {row.critic_loss:.4f}, "
            f"entropy {row.entropy:.3f}, samples {row.env_samples}"
        )
        if eval_log is not None and row.epoch % eval_every == 0:
            rate, mean_return = evaluate(row.epoch)
            eval_log.append(EvalMetrics(epoch=row.epoch, env_samples=row.env_samples, wall_ms=row.wall_ms,
                                        success_rate=rate, mean_return=mean_return))
            logger.info(f"[{label}] epoch {row.epoch}: evaluation success rate {rate:.2f}")
    return metrics_log.read()


def evaluate_agent(env: Environment, agent, episodes: int, seed: int, epoch: int) -> Tuple[float, float]:
    results = rollout_eval(env, agent, episodes, env.episode_len, rng_for(seed, "eval", str(epoch)))
    return success_rate(results), float(np.mean([r.total_reward for r in results]))


def run_dmo(cfg, env: Environment, data: PlayDataset, global_model: Optional[GlobalDynamics],
            reward: GlobalReward, local, out_dir, coupled: bool = False):
    """Full policy-training stage; returns (policy, critic, metrics frame).

    Writes metrics.csv, eval.csv and the policy, critic and finetuned local checkpoints.
    """
    hp, seed = cfg.hp, cfg.seed
    label = "no-diffusion" if coupled else "dmo"
    init = rng_for(seed, label, "init")
    policy = SquashedGaussianPolicy(local.feature_dim, env.action_dim, hp.hidden, seed=int(init.integers(2 ** 31)))
    critic = Critic(local.feature_dim, hp.hidden, seed=int(init.integers(2 ** 31)))

    play_set = None
    if cfg.local_model.play_mix > 0:
        targets = reward_targets(data, reward, global_model, start_lag=hp.horizon // 2)
        play_set = build_local_set(local, data, targets)
    state = build_train_state(policy, critic, local, None if coupled else global_model, reward, data, hp,
                              cfg.local_model, seed, play_set=play_set, coupled=coupled)

    agent = LatentAgent(policy, local)
    frame = run_epochs(
        lambda: train_epoch(state), hp.epochs, out_dir,
        evaluate=lambda epoch: evaluate_agent(env, agent, hp.eval_episodes, seed, epoch),
        eval_every=hp.eval_every, label=label,
    )

    out_dir = Path(out_dir)
    policy.save(out_dir / "policy")
    critic.save(out_dir / "critic")
    local.save(out_dir / "local_finetuned")
    logger.info(f"[{label}] saved policy, critic and finetuned local model to {out_dir}")
    return policy, critic, frame
