from pathlib import Path

import numpy as np
import pytest

from dmosapo.envs.linear import LinearEnv
from dmosapo.envs.play_data import collect_play
from dmosapo.models.global_dynamics import SimulatorDynamics
from dmosapo.models.local import LocalWorldModel
from dmosapo.models.policy import Critic, SquashedGaussianPolicy
from dmosapo.models.reward import GlobalReward
from dmosapo.schemas.config import CollectionPolicy, HyperParams, LocalModelConfig
from dmosapo.service.dmo_service import build_train_state

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

# Overrides that shrink the linear experiment to a few seconds
TINY_OVERRIDES = [
    "collect.n_steps=600",
    "global_model.min_transitions=100",
    "global_model.epochs=1",
    "global_model.hidden=8",
    "global_model.n_members=2",
    "local_model.h_dim=4",
    "local_model.z_dim=2",
    "local_model.hidden=8",
    "local_model.batch_size=8",
    "local_model.pretrain_steps=5",
    "hp.horizon=4",
    "hp.l_init=2",
    "hp.batch_size=4",
    "hp.hidden=8",
    "hp.epochs=2",
    "hp.eval_every=1",
    "hp.eval_episodes=1",
]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def linear_env():
    return LinearEnv()


@pytest.fixture
def linear_data(linear_env):
    return collect_play(linear_env, CollectionPolicy.RANDOM, 300, 0, np.random.default_rng(0), max_episode_len=50)


@pytest.fixture
def tiny_hp():
    return HyperParams(horizon=4, l_init=2, batch_size=4, epochs=2, hidden=8, eval_every=0)


@pytest.fixture
def tiny_local_cfg():
    return LocalModelConfig(h_dim=4, z_dim=2, hidden=8, batch_size=8, pretrain_steps=5)


@pytest.fixture
def tiny_local():
    return LocalWorldModel(obs_dim=2, action_dim=2, h_dim=4, z_dim=2, hidden=8, seed=0)


@pytest.fixture
def make_state(linear_env, linear_data, tiny_local_cfg):
    """Fresh, fully seeded training state on the linear system."""

    def build(hp, global_model=None, seed=0, coupled=False):
        local = LocalWorldModel(obs_dim=2, action_dim=2, h_dim=4, z_dim=2, hidden=8, seed=seed)
        policy = SquashedGaussianPolicy(local.feature_dim, 2, hp.hidden, seed=seed + 1)
        critic = Critic(local.feature_dim, hp.hidden, seed=seed + 2)
        reward = GlobalReward("analytic", linear_env)
        world = None if coupled else (global_model or SimulatorDynamics(linear_env))
        return build_train_state(policy, critic, local, world, reward, linear_data, hp, tiny_local_cfg,
                                 seed, coupled=coupled)

    return build
