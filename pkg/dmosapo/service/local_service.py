import logging
from typing import Optional, Tuple

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.exceptions import EmptyReplayBufferError, TrainingDivergedError
from dmosapo.core.optim import Adam
from dmosapo.envs.play_data import PlayDataset
from dmosapo.models.global_dynamics import GlobalDynamics
from dmosapo.models.local import LocalWorldModel
from dmosapo.models.reward import GlobalReward
from dmosapo.schemas.metrics import LocalTrainingReport
from dmosapo.utils.replay import ReplayBuffer, TransitionBatch
from dmosapo.utils.seeding import rng_for

logger = logging.getLogger(__name__)

REFILTER_EVERY = 250


def reward_targets(data: PlayDataset, reward: GlobalReward, global_model: Optional[GlobalDynamics],
                   start_lag: int = 32) -> list:
    """Per-episode global reward targets r_t = reward(o_{t+1}, a_t).

    The energy reward is conditioned on the frame ``start_lag`` steps earlier
    (clamped to the episode start) as its start observation.
    """
    targets = []
    for ep in data:
        T = len(ep)
        starts = ep.observations[np.maximum(np.arange(T) - start_lag, 0)]
        feats = None
        if reward.needs_features:
            single = PlayDataset([ep], data.env, data.seed, data.policy)
            ctx, act, _ = single.context_windows(global_model.context_len)
            feats = global_model.features(ctx, act)
        targets.append(reward.infer(ep.observations[1:], ep.actions, starts, feats))
    return targets


def build_local_set(local: LocalWorldModel, data: PlayDataset, targets: list) -> TransitionBatch:
    """Filter every episode without gradients and flatten into single-step samples."""
    parts = []
    for ep, r in zip(data, targets):
        hs, _ = local.filter_episode(ep.observations, ep.actions)
        parts.append(TransitionBatch(
            h=hs[:-1], obs=ep.observations[:-1], action=ep.actions,
            next_obs=ep.observations[1:], reward=np.asarray(r, dtype=np.float64),
        ))
    out = parts[0]
    for p in parts[1:]:
        out = TransitionBatch.concat(out, p)
    return out


def local_loss(local: LocalWorldModel, batch: TransitionBatch, cfg, rng: np.random.Generator):
    eps = rng.standard_normal((2, len(batch), local.z_dim))
    return local.single_step_loss(
        batch.h, batch.obs, batch.action, batch.next_obs, batch.reward, eps,
        free_bits=cfg.free_bits, kl_scale=cfg.kl_scale,
        recon_scale=cfg.recon_scale, reward_scale=cfg.reward_scale,
    )


def local_optimizer(local: LocalWorldModel, cfg, lr: float) -> Adam:
    params = local.non_encoder_parameters() if cfg.freeze_encoder else local.parameters()
    return Adam(params, lr=lr)


def _update(local: LocalWorldModel, opt: Adam, batch: TransitionBatch, cfg, rng, stage: str, step: int) -> float:
    opt.zero_grad()
    local.zero_grad()
    if cfg.freeze_encoder:
        with local.encoder.frozen():
            loss, _, _ = local_loss(local, batch, cfg, rng)
    else:
        loss, _, _ = local_loss(local, batch, cfg, rng)
    value = loss.item()
    if not np.isfinite(value):
        logger.error(f"{stage}: non-finite local-model loss at step {step}")
        raise TrainingDivergedError(stage, {"step": step, "loss": value})
    ad.backward(loss)
    opt.step()
    return value


def pretrain_local(local: LocalWorldModel, data: PlayDataset, reward: GlobalReward,
                   global_model: Optional[GlobalDynamics], cfg, seed: int,
                   start_lag: int = 32) -> Tuple[LocalWorldModel, LocalTrainingReport]:
    """Offline single-step pretraining on play data with global-reward targets."""
    train, held = data.split(cfg.holdout, rng_for(seed, "local", "split"))
    frames = np.concatenate([ep.observations for ep in train])
    local.obs_mean = frames.mean(axis=0)
    local.obs_std = np.maximum(frames.std(axis=0), 1e-6)

    train_targets = reward_targets(train, reward, global_model, start_lag)
    rng = rng_for(seed, "local", "pretrain")
    opt = local_optimizer(local, cfg, cfg.lr)
    samples = build_local_set(local, train, train_targets)

    value = float("nan")
    for step in range(cfg.pretrain_steps):
        if step > 0 and step % REFILTER_EVERY == 0:
            samples = build_local_set(local, train, train_targets)
        batch = samples.take(rng.integers(len(samples), size=cfg.batch_size))
        value = _update(local, opt, batch, cfg, rng, "pretrain-local", step)
        if (step + 1) % 500 == 0:
            logger.info(f"local pretrain step {step + 1}/{cfg.pretrain_steps}: loss {value:.4f}")
    local.trained_steps += cfg.pretrain_steps

    eval_data = held if held.episodes else train
    eval_targets = reward_targets(eval_data, reward, global_model, start_lag)
    report = evaluate_local(local, build_local_set(local, eval_data, eval_targets), cfg, rng)
    report.steps = cfg.pretrain_steps
    logger.info(
        f"Local model: recon MSE {report.recon_mse:.3e} (obs var {report.obs_variance:.3e}), "
        f"reward MSE {report.reward_mse:.3e} (var {report.reward_variance:.3e}), "
        f"KL under free bits on {report.kl_below_free_bits:.0%} of steps"
    )
    return local, report


def evaluate_local(local: LocalWorldModel, samples: TransitionBatch, cfg, rng) -> LocalTrainingReport:
    with ad.no_grad():
        _, parts, kl = local_loss(local, samples, cfg, rng)
        posterior_mean = local.reconstruct(samples.next_obs, _next_context(local, samples))
    recon_mse = float(np.mean((posterior_mean - samples.next_obs) ** 2))
    return LocalTrainingReport(
        steps=local.trained_steps,
        recon_mse=recon_mse,
        obs_variance=float(np.mean(samples.next_obs.var(axis=0))),
        kl_below_free_bits=float(np.mean(kl <= cfg.free_bits)),
        reward_mse=parts["reward"],
        reward_variance=float(samples.reward.var()),
    )


def _next_context(local: LocalWorldModel, samples: TransitionBatch) -> np.ndarray:
    """h_{t+1} from the filtered h_t, the posterior mean z_t and a_t."""
    with ad.no_grad():
        mu, _ = local.posterior_stats(samples.obs, ad.Value(samples.h))
        h_next = local.cell(ad.concat([mu, ad.Value(samples.action)], axis=-1), ad.Value(samples.h))
    return h_next.data


def finetune_local(local: LocalWorldModel, opt: Adam, buffer: ReplayBuffer,
                   play_set: Optional[TransitionBatch], cfg, rng: np.random.Generator,
                   steps: int = 1, batch_size: Optional[int] = None) -> float:
    """Same single-step losses on global-model rollouts, mixed with play data."""
    if len(buffer) == 0:
        raise EmptyReplayBufferError("local-model fine-tuning")
    batch_size = batch_size or cfg.batch_size
    n_play = int(round(cfg.play_mix * batch_size)) if play_set is not None and len(play_set) else 0
    losses = []
    for step in range(steps):
        batch = buffer.sample(rng, batch_size - n_play)
        if n_play:
            batch = TransitionBatch.concat(batch, play_set.take(rng.integers(len(play_set), size=n_play)))
        losses.append(_update(local, opt, batch, cfg, rng, "finetune-local", step))
    return float(np.mean(losses)) if losses else float("nan")


def single_step_error(local: LocalWorldModel, samples: TransitionBatch) -> float:
    """Mean squared error of the prior-mean prediction decoded vs the next observation."""
    with ad.no_grad():
        h_next = _next_context(local, samples)
        mu_p, _ = local.prior_stats(ad.Value(h_next))
        pred = local.decoder(ad.concat([ad.Value(h_next), mu_p], axis=-1)).data
    pred = pred * local.obs_std + local.obs_mean
    return float(np.mean((pred - samples.next_obs) ** 2))
