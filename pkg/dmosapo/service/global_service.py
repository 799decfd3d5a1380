import logging
from typing import Optional, Tuple

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.exceptions import InsufficientDataError, TrainingDivergedError
from dmosapo.core.optim import Adam
from dmosapo.envs.base import Environment
from dmosapo.envs.play_data import PlayDataset
from dmosapo.models.global_dynamics import (
    DenoiserDynamics,
    EnsembleDynamics,
    GlobalDynamics,
    build_global,
)
from dmosapo.schemas.metrics import DriftReport, GlobalTrainingReport
from dmosapo.utils.seeding import rng_for

logger = logging.getLogger(__name__)


def _check_finite(loss: float, stage: str, **where):
    if not np.isfinite(loss):
        logger.error(f"{stage}: non-finite loss {loss} at {where}")
        raise TrainingDivergedError(stage, {**where, "loss": loss})


def train_global(
    data: PlayDataset,
    cfg,
    seed: int,
    env: Optional[Environment] = None,
) -> Tuple[GlobalDynamics, GlobalTrainingReport]:
    """Fit a global forward model on play data (ensemble or few-step denoiser)."""
    variant = getattr(cfg.variant, "value", cfg.variant)
    if variant == "simulator":
        model = build_global(cfg, data.obs_dim, data.action_dim, env=env)
        return model, GlobalTrainingReport(variant=variant, epochs=0, train_loss=0.0,
                                           holdout_mse=0.0, holdout_delta_variance=0.0)

    if data.n_transitions < cfg.min_transitions:
        raise InsufficientDataError(cfg.min_transitions, data.n_transitions)

    train, held = data.split(cfg.holdout, rng_for(seed, "global", "split"))
    ctx, act, nxt = train.context_windows(cfg.context_len)
    model = build_global(cfg, data.obs_dim, data.action_dim, seed=seed)
    deltas = nxt - ctx[:, -1]
    model.fit_normalizers(np.concatenate([ep.observations for ep in train]), deltas)
    cond = model.conditioning(ctx, act)
    target = (deltas - model.delta_mean) / model.delta_std
    n = len(target)

    last_loss = float("nan")
    if isinstance(model, EnsembleDynamics):
        for i in range(len(model.members)):
            rng = rng_for(seed, "global", "member", str(i))
            opt = Adam(model.members[i].parameters(), lr=cfg.lr)
            for epoch in range(cfg.epochs):
                order = rng.permutation(n)
                losses = []
                for b, start in enumerate(range(0, n, cfg.batch_size)):
                    idx = order[start:start + cfg.batch_size]
                    opt.zero_grad()
                    loss = model.member_loss(i, cond[idx], target[idx])
                    _check_finite(loss.item(), "train-global", member=i, epoch=epoch, batch=b)
                    ad.backward(loss)
                    opt.step()
                    losses.append(loss.item())
                last_loss = float(np.mean(losses))
                logger.info(f"ensemble member {i} epoch {epoch + 1}/{cfg.epochs}: loss {last_loss:.5f}")
    elif isinstance(model, DenoiserDynamics):
        model.sigma_data = float(np.sqrt(np.mean(target ** 2)))
        rng = rng_for(seed, "global", "denoiser")
        opt = Adam(model.parameters(), lr=cfg.lr)
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                opt.zero_grad()
                loss = model.denoising_loss(cond[idx], target[idx], rng, cfg.p_mean, cfg.p_std, cfg.schedule_mix)
                _check_finite(loss.item(), "train-global", epoch=epoch, batch=b)
                ad.backward(loss)
                opt.step()
                losses.append(loss.item())
            last_loss = float(np.mean(losses))
            logger.info(f"denoiser epoch {epoch + 1}/{cfg.epochs}: loss {last_loss:.5f}")

    model.trained_epochs = cfg.epochs
    if model.is_untrained:
        logger.warning("Global model trained for zero epochs; returning its initialization")

    holdout_mse, delta_var = one_step_error(model, held if held.episodes else train, cfg.context_len, seed)
    report = GlobalTrainingReport(
        variant=variant, epochs=cfg.epochs, train_loss=last_loss,
        holdout_mse=holdout_mse, holdout_delta_variance=delta_var,
        sigma_data=getattr(model, "sigma_data", None),
    )
    logger.info(f"Global model held-out one-step MSE {holdout_mse:.3e} (delta variance {delta_var:.3e})")
    return model, report


def one_step_error(model: GlobalDynamics, data: PlayDataset, context_len: int, seed: int = 0) -> Tuple[float, float]:
    """(one-step prediction MSE, variance of the observation delta), averaged over dimensions."""
    ctx, act, nxt = data.context_windows(context_len)
    pred = model.predict(ctx, act, rng_for(seed, "global", "holdout"))
    deltas = nxt - ctx[:, -1]
    return float(np.mean((pred - nxt) ** 2)), float(np.mean(deltas.var(axis=0)))


def rollout_drift(
    model: GlobalDynamics,
    env: Environment,
    data: PlayDataset,
    n_steps: int,
    n_starts: int,
    seed: int = 0,
) -> DriftReport:
    """Open-loop drift under recorded actions, against the true simulator.

    Each start is prefilled with real frames; the true trajectory is re-simulated
    from the recorded state. Error at step 0 compares the last real context frame
    with itself and is therefore 0.
    """
    rng = rng_for(seed, "drift", "starts")
    c = model.context_len
    eligible = [ep for ep in data if len(ep) >= c + n_steps]
    if not eligible:
        raise InsufficientDataError(c + n_steps, max((len(ep) for ep in data), default=0),
                                    "steps in some episode")

    obs_err = np.zeros((n_starts, n_steps + 1))
    block_err = np.zeros((n_starts, n_steps + 1)) if hasattr(env, "block_position_from_observation") else None
    epistemic = np.zeros((n_starts, n_steps + 1))

    for k in range(n_starts):
        ep = eligible[int(rng.integers(len(eligible)))]
        start = int(rng.integers(c - 1, len(ep) - n_steps + 1))
        handle = model.handle(seed=seed + k).prefill(ep.observations[start - c + 1:start + 1])
        state = env.state_from_vector(ep.states[start])
        for t in range(n_steps):
            action = ep.actions[start + t]
            epistemic[k, t + 1] = float(handle.uncertainty(action)[0])
            pred = handle.predict(action)[0]
            state = env.step(state, action)
            truth = env.observe(state)
            obs_err[k, t + 1] = float(np.sqrt(np.mean((pred - truth) ** 2)))
            if block_err is not None:
                diff = env.block_position_from_observation(pred) - env.block_position_from_observation(truth)
                block_err[k, t + 1] = float(np.hypot(*np.nan_to_num(diff, nan=1.0)))

    raw = obs_err.mean(axis=0)
    report = DriftReport(
        variant=model.variant,
        steps=list(range(n_steps + 1)),
        obs_error=raw.tolist(),
        obs_error_smoothed=np.maximum.accumulate(raw).tolist(),
        epistemic_std=epistemic.mean(axis=0).tolist(),
    )
    if block_err is not None:
        block = block_err.mean(axis=0)
        report.block_error = block.tolist()
        report.block_error_smoothed = np.maximum.accumulate(block).tolist()
    return report
