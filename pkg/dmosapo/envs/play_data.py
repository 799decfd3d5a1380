"""
Play-data collection and the on-disk dataset directory.

A dataset is a list of episodes. Episode ``k`` with ``T`` transitions stores
``T + 1`` observations/states and ``T`` actions/intent labels. On disk the
episodes are concatenated into flat little-endian arrays and split again using
the episode lengths recorded in ``manifest.json``.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from dmosapo.core.exceptions import SchemaMismatchError
from dmosapo.envs.base import Environment
from dmosapo.schemas.config import CollectionPolicy
from dmosapo.schemas.dataset import DATASET_SCHEMA_VERSION, ArrayFile, DatasetManifest

logger = logging.getLogger(__name__)


@dataclass
class Episode:
    observations: np.ndarray   # (T + 1, obs_dim)
    actions: np.ndarray        # (T, action_dim)
    intent: np.ndarray         # (T,) bool
    states: np.ndarray         # (T + 1, state_dim)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class PlayDataset:
    episodes: List[Episode]
    env: str
    seed: int
    policy: str
    env_config: dict = field(default_factory=dict)

    # ── views ───────────────────────────────────────────────────

    @property
    def n_transitions(self) -> int:
        return int(sum(len(ep) for ep in self.episodes))

    @property
    def obs_dim(self) -> int:
        return int(self.episodes[0].observations.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.episodes[0].actions.shape[1])

    @property
    def intent_fraction(self) -> float:
        n = self.n_transitions
        return float(sum(ep.intent.sum() for ep in self.episodes) / n) if n else 0.0

    def __iter__(self) -> Iterator[Episode]:
        return iter(self.episodes)

    def transitions(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flat (obs_t, a_t, obs_{t+1}, intent_t) arrays over all episodes."""
        obs = np.concatenate([ep.observations[:-1] for ep in self.episodes])
        act = np.concatenate([ep.actions for ep in self.episodes])
        nxt = np.concatenate([ep.observations[1:] for ep in self.episodes])
        intent = np.concatenate([ep.intent for ep in self.episodes])
        return obs, act, nxt, intent

    def context_windows(self, context_len: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(context (N, context_len, obs_dim), action (N, act), next obs (N, obs_dim)).

        Frames before an episode start are padded by repeating its first frame.
        """
        contexts, actions, targets = [], [], []
        for ep in self.episodes:
            pad = np.repeat(ep.observations[:1], context_len - 1, axis=0)
            frames = np.concatenate([pad, ep.observations])
            idx = np.arange(len(ep))[:, None] + np.arange(context_len)[None, :]
            contexts.append(frames[idx])
            actions.append(ep.actions)
            targets.append(ep.observations[1:])
        return np.concatenate(contexts), np.concatenate(actions), np.concatenate(targets)

    def intent_segments(self) -> List[Tuple[int, int, int]]:
        """Maximal runs of intent-labelled steps as (episode, first frame, last frame)."""
        segments = []
        for k, ep in enumerate(self.episodes):
            labels = np.concatenate([[False], ep.intent, [False]]).astype(np.int8)
            edges = np.diff(labels)
            starts = np.flatnonzero(edges == 1)
            ends = np.flatnonzero(edges == -1)
            # a run over steps [s, e) spans frames s..e
            segments.extend((k, int(s), int(e)) for s, e in zip(starts, ends))
        return segments

    def split(self, holdout: float, rng: np.random.Generator) -> Tuple["PlayDataset", "PlayDataset"]:
        """Episode-level train / held-out split; held-out is never empty when holdout > 0."""
        order = rng.permutation(len(self.episodes))
        n_held = int(round(holdout * len(order)))
        if holdout > 0 and len(order) > 1:
            n_held = min(max(n_held, 1), len(order) - 1)
        held = sorted(order[:n_held].tolist())
        train = sorted(order[n_held:].tolist())
        return self._subset(train), self._subset(held)

    def _subset(self, indices: List[int]) -> "PlayDataset":
        return PlayDataset(
            episodes=[self.episodes[i] for i in indices],
            env=self.env, seed=self.seed, policy=self.policy, env_config=self.env_config,
        )

    def sample_windows(self, rng: np.random.Generator, length: int, count: int) -> List[np.ndarray]:
        """Random real observation windows of ``length`` frames (for context prefill)."""
        eligible = [ep for ep in self.episodes if len(ep.observations) >= length]
        if not eligible:
            eligible = self.episodes
            length = min(len(ep.observations) for ep in eligible)
        windows = []
        for _ in range(count):
            ep = eligible[int(rng.integers(len(eligible)))]
            start = int(rng.integers(len(ep.observations) - length + 1))
            windows.append(ep.observations[start:start + length].copy())
        return windows


# ==========================================
# COLLECTION
# ==========================================

def collect_play(
    env: Environment,
    policy: CollectionPolicy,
    n_steps: int,
    seed: int,
    rng: np.random.Generator,
    action_noise: float = 0.1,
    max_episode_len: int = 400,
    wander_range: Tuple[int, int] = (10, 40),
    push_max: int = 150,
    env_config: Optional[dict] = None,
) -> PlayDataset:
    """Roll the scripted (or purely random) collector in the true environment.

    The scripted collector alternates random wandering (intent off) with goal-directed
    segments (intent on) that end when the task is solved or after ``push_max`` steps.
    Episodes end after ``max_episode_len`` steps or when the block locks in a corner.
    """
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    policy = CollectionPolicy(policy)
    episodes: List[Episode] = []
    remaining = n_steps

    while remaining > 0:
        state = env.reset(rng)
        obs, acts, labels, states = [env.observe(state)], [], [], [env.state_vector(state)]
        pushing = False
        segment_left = int(rng.integers(wander_range[0], wander_range[1] + 1))
        previous = None
        limit = min(max_episode_len, remaining)

        while len(acts) < limit:
            if policy == CollectionPolicy.RANDOM:
                action = rng.uniform(-1.0, 1.0, size=env.action_dim)
                pushing = False
            else:
                if segment_left <= 0 or (pushing and env.success(state)):
                    pushing = not pushing
                    segment_left = push_max if pushing else int(rng.integers(wander_range[0], wander_range[1] + 1))
                    previous = None
                if pushing:
                    action = env.oracle_action(state)
                else:
                    action = env.wander_action(rng, previous)
                    previous = action
                segment_left -= 1
                if action_noise > 0:
                    action = action + rng.normal(0.0, action_noise, size=env.action_dim)
            action = env.clip_action(action)
            state = env.step(state, action)
            obs.append(env.observe(state))
            states.append(env.state_vector(state))
            acts.append(action)
            labels.append(pushing)
            if env.is_stuck(state):
                logger.debug(f"Corner lock after {len(acts)} steps, resetting")
                break

        episodes.append(Episode(
            observations=np.asarray(obs, dtype=np.float64),
            actions=np.asarray(acts, dtype=np.float64),
            intent=np.asarray(labels, dtype=bool),
            states=np.asarray(states, dtype=np.float64),
        ))
        remaining -= len(acts)

    dataset = PlayDataset(
        episodes=episodes, env=env.name, seed=seed, policy=policy.value,
        env_config=env_config or {},
    )
    logger.info(
        f"Collected {dataset.n_transitions} transitions in {len(episodes)} episodes "
        f"({policy.value}, intent fraction {dataset.intent_fraction:.2f})"
    )
    return dataset


# ==========================================
# PERSISTENCE
# ==========================================

def save_dataset(dataset: PlayDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    eps = dataset.episodes
    arrays = {
        "observations": np.concatenate([ep.observations for ep in eps]).astype("<f8"),
        "actions": np.concatenate([ep.actions for ep in eps]).astype("<f8"),
        "states": np.concatenate([ep.states for ep in eps]).astype("<f8"),
    }
    files = {}
    for name, arr in arrays.items():
        fname = f"{name}.f64"
        (directory / fname).write_bytes(arr.tobytes())
        files[name] = ArrayFile(file=fname, dtype="<f8", shape=list(arr.shape))
    intent = np.concatenate([ep.intent for ep in eps]).astype(np.uint8)
    (directory / "intent.u8").write_bytes(np.packbits(intent).tobytes())
    files["intent"] = ArrayFile(file="intent.u8", dtype="u1-packbits", shape=[int(intent.size)])

    manifest = DatasetManifest(
        env=dataset.env,
        env_config=dataset.env_config,
        seed=dataset.seed,
        policy=dataset.policy,
        n_episodes=len(eps),
        n_transitions=dataset.n_transitions,
        episode_lengths=[len(ep) for ep in eps],
        obs_dim=dataset.obs_dim,
        action_dim=dataset.action_dim,
        state_dim=int(eps[0].states.shape[1]),
        intent_fraction=dataset.intent_fraction,
        arrays=files,
    )
    (directory / "manifest.json").write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
    )
    return directory


def load_dataset(directory) -> PlayDataset:
    directory = Path(directory)
    manifest = DatasetManifest.model_validate_json((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.schema_version != DATASET_SCHEMA_VERSION:
        raise SchemaMismatchError(
            f"Dataset schema version {manifest.schema_version} is not supported "
            f"(expected {DATASET_SCHEMA_VERSION})"
        )

    def read(name: str) -> np.ndarray:
        spec = manifest.arrays[name]
        raw = np.frombuffer((directory / spec.file).read_bytes(), dtype="<f8")
        return raw.reshape(spec.shape).astype(np.float64)

    observations, actions, states = read("observations"), read("actions"), read("states")
    intent_spec = manifest.arrays["intent"]
    packed = np.frombuffer((directory / intent_spec.file).read_bytes(), dtype=np.uint8)
    intent = np.unpackbits(packed)[: intent_spec.shape[0]].astype(bool)

    episodes = []
    frame, step = 0, 0
    for length in manifest.episode_lengths:
        episodes.append(Episode(
            observations=observations[frame:frame + length + 1],
            actions=actions[step:step + length],
            intent=intent[step:step + length],
            states=states[frame:frame + length + 1],
        ))
        frame += length + 1
        step += length
    return PlayDataset(
        episodes=episodes, env=manifest.env, seed=manifest.seed,
        policy=manifest.policy, env_config=manifest.env_config,
    )
