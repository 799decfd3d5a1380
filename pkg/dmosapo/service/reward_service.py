import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from dmosapo.core import autodiff as ad
from dmosapo.core.exceptions import DegenerateLabelsError, NoGoalSegmentsError, TrainingDivergedError
from dmosapo.core.optim import Adam
from dmosapo.envs.base import Environment
from dmosapo.envs.play_data import PlayDataset
from dmosapo.models.global_dynamics import GlobalDynamics
from dmosapo.models.reward import EnergyModel, IntentRewardHead
from dmosapo.utils.seeding import rng_for

logger = logging.getLogger(__name__)

MIN_SEGMENT_FRAMES = 3


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation; NaN when either side is constant."""
    frame = pd.DataFrame({"x": np.asarray(x, dtype=np.float64), "y": np.asarray(y, dtype=np.float64)})
    return float(frame.corr(method="spearman").loc["x", "y"])


def goal_segments(data: PlayDataset, env: Environment, tolerance: float) -> List[np.ndarray]:
    """Frame arrays of intent segments whose last frame is within ``tolerance`` of the goal."""
    segments = []
    for k, first, last in data.intent_segments():
        frames = data.episodes[k].observations[first:last + 1]
        if len(frames) >= MIN_SEGMENT_FRAMES and env.goal_distance(frames[-1]) < tolerance:
            segments.append(frames)
    return segments


# ==========================================
# ENERGY
# ==========================================

def train_energy(data: PlayDataset, env: Environment, cfg, seed: int) -> Tuple[EnergyModel, dict]:
    """Bradley-Terry training over random (start, goal, i, j) draws inside goal-reaching segments."""
    train, held = data.split(cfg.holdout, rng_for(seed, "reward", "split"))
    segments = goal_segments(train, env, cfg.goal_tolerance)
    if not segments:
        raise NoGoalSegmentsError(len(train.intent_segments()), cfg.goal_tolerance)
    held_segments = goal_segments(held, env, cfg.goal_tolerance)
    if not held_segments:
        logger.warning("No held-out goal-reaching segments; evaluating on training segments")
        held_segments = segments

    rng = rng_for(seed, "reward", "energy")
    if cfg.shuffle_time:
        segments = [seg[rng.permutation(len(seg))] for seg in segments]

    model = EnergyModel(data.obs_dim, cfg.hidden, seed=int(rng.integers(2 ** 31)))
    all_frames = np.concatenate(segments)
    model.obs_mean = all_frames.mean(axis=0)
    model.obs_std = np.maximum(all_frames.std(axis=0), 1e-6)
    opt = Adam(model.parameters(), lr=cfg.lr)

    lengths = np.array([len(s) for s in segments])
    for step in range(cfg.energy_steps):
        which = rng.integers(len(segments), size=cfg.pair_batch)
        i = np.array([rng.integers(lengths[w]) for w in which])
        j = np.array([rng.integers(lengths[w]) for w in which])
        s_i = np.stack([segments[w][a] for w, a in zip(which, i)])
        s_j = np.stack([segments[w][b] for w, b in zip(which, j)])
        start = np.stack([segments[w][0] for w in which])
        goal = np.stack([segments[w][-1] for w in which])
        opt.zero_grad()
        loss = model.bt_loss(s_i, s_j, i, j, start, goal)
        if not np.isfinite(loss.item()):
            raise TrainingDivergedError("train-reward", {"model": "energy", "step": step, "loss": loss.item()})
        ad.backward(loss)
        opt.step()
        if (step + 1) % 500 == 0:
            logger.info(f"energy step {step + 1}/{cfg.energy_steps}: bt loss {loss.item():.4f}")
    model.trained_steps = cfg.energy_steps

    with ad.no_grad():
        energies = np.concatenate([model.energy(seg, seg[0], seg[-1]).data for seg in segments])
    model.energy_mean = float(energies.mean())
    model.energy_std = float(max(energies.std(), 1e-6))

    rho, above = evaluate_energy(model, held_segments)
    logger.info(f"Energy model: held-out Spearman {rho:.3f}, goal above start in {above:.0%} of segments")
    return model, {"energy_spearman": rho, "energy_goal_above_start": above, "shuffle_time": cfg.shuffle_time}


def evaluate_energy(model: EnergyModel, segments: List[np.ndarray]) -> Tuple[float, float]:
    """(mean within-segment Spearman between energy and time, fraction with goal energy > start energy)."""
    rhos, above = [], []
    with ad.no_grad():
        for seg in segments:
            e = model.energy(seg, seg[0], seg[-1]).data
            rho = spearman(e, np.arange(len(seg)))
            if np.isfinite(rho):
                rhos.append(rho)
            above.append(e[-1] > e[0])
    return (float(np.mean(rhos)) if rhos else float("nan")), float(np.mean(above))


# ==========================================
# INTENT
# ==========================================

def _intent_arrays(data: PlayDataset, wm: Optional[GlobalDynamics], context_len: int):
    ctx, act, nxt = data.context_windows(context_len)
    labels = np.concatenate([ep.intent for ep in data]).astype(np.float64)
    feats = wm.features(ctx, act) if wm is not None else None
    return nxt, act, labels, feats


def train_intent_head(wm: Optional[GlobalDynamics], data: PlayDataset, env: Environment,
                      cfg, seed: int) -> Tuple[IntentRewardHead, dict]:
    """BCE on intent labels; consumes global-model features when the denoiser is active."""
    fraction = data.intent_fraction
    if fraction <= 0.0 or fraction >= 1.0:
        raise DegenerateLabelsError(fraction)

    use_features = (
        cfg.use_global_features and wm is not None and wm.variant == "denoiser"
    )
    feature_model = wm if use_features else None
    context_len = wm.context_len if wm is not None else 1
    train, held = data.split(cfg.holdout, rng_for(seed, "reward", "split"))

    nxt, act, labels, feats = _intent_arrays(train, feature_model, context_len)
    rng = rng_for(seed, "reward", "intent")
    head = IntentRewardHead(
        data.obs_dim, data.action_dim,
        feature_dim=feats.shape[1] if feats is not None else 0,
        hidden=cfg.hidden, milestone_bonus=cfg.milestone_bonus, seed=int(rng.integers(2 ** 31)),
    )
    head.obs_mean = nxt.mean(axis=0)
    head.obs_std = np.maximum(nxt.std(axis=0), 1e-6)
    opt = Adam(head.parameters(), lr=cfg.lr)

    n = len(labels)
    for epoch in range(cfg.intent_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.intent_batch):
            idx = order[start:start + cfg.intent_batch]
            opt.zero_grad()
            loss = head.bce(nxt[idx], act[idx], labels[idx], None if feats is None else feats[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError("train-reward", {"model": "intent", "epoch": epoch, "loss": loss.item()})
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        logger.info(f"intent epoch {epoch + 1}/{cfg.intent_epochs}: bce {np.mean(losses):.4f}")

    eval_data = held if held.episodes else train
    h_nxt, h_act, h_labels, h_feats = _intent_arrays(eval_data, feature_model, context_len)
    with ad.no_grad():
        bce = head.bce(h_nxt, h_act, h_labels, h_feats).item()
    accuracy = float(np.mean((head.probability(h_nxt, h_act, h_feats) > 0.5) == (h_labels > 0.5)))
    logger.info(f"Intent head: held-out accuracy {accuracy:.3f}, bce {bce:.4f}")
    return head, {"intent_accuracy": accuracy, "intent_bce": bce}
