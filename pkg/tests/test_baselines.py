import numpy as np
import pytest

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.core.exceptions import ConfigValidationError
from dmosapo.core.optim import Adam
from dmosapo.models.global_dynamics import SimulatorDynamics
from dmosapo.models.policy import Critic, SquashedGaussianPolicy
from dmosapo.models.reward import GlobalReward, IntentRewardHead
from dmosapo.schemas.config import HyperParams, ZeroOrderConfig
from dmosapo.service.baseline_service import (
    ObservationAgent,
    ZeroOrderState,
    clipped_surrogate,
    run_no_diffusion,
    zeroth_order_epoch,
)
from dmosapo.service.dmo_service import imagine


@pytest.mark.parametrize(
    "advantage, expected",
    [(1.0, [0.5, 1.0, 1.2]), (-1.0, [-0.8, -1.0, -1.5])],
)
def test_clipped_surrogate(advantage, expected):
    ratio = Value(np.array([0.5, 1.0, 1.5]))
    out = clipped_surrogate(ratio, np.full(3, advantage), 0.2)
    np.testing.assert_allclose(out.data, expected)


def test_zero_advantage_has_zero_gradient():
    ratio = Value(np.array([0.7, 1.0, 1.4]), requires_grad=True)
    ad.backward(ad.mean(clipped_surrogate(ratio, np.zeros(3), 0.2)))
    np.testing.assert_array_equal(ratio.grad, np.zeros(3))


def test_clipped_ratio_blocks_gradient_outside_trust_region():
    ratio = Value(np.array([1.5]), requires_grad=True)
    ad.backward(ad.vsum(clipped_surrogate(ratio, np.ones(1), 0.2)))
    assert ratio.grad[0] == 0.0


def _feature_reward(env):
    return GlobalReward("intent", env, intent=IntentRewardHead(2, 2, feature_dim=3, hidden=8))


def test_no_diffusion_rejects_feature_rewards(linear_env, linear_data, tiny_local, tmp_path):
    with pytest.raises(ConfigValidationError):
        run_no_diffusion(None, linear_env, linear_data, _feature_reward(linear_env), tiny_local, tmp_path)


def test_coupled_imagination_rejects_feature_rewards(linear_env, linear_data, tiny_local, tiny_hp):
    policy = SquashedGaussianPolicy(tiny_local.feature_dim, 2, hidden=8)
    windows = np.stack(linear_data.sample_windows(np.random.default_rng(0), 2, 2))
    with pytest.raises(ConfigValidationError):
        imagine(policy, None, tiny_local, windows, tiny_hp, np.random.default_rng(0),
                reward=_feature_reward(linear_env), coupled=True)


def test_zeroth_order_epoch_counts_model_samples(linear_env, linear_data):
    cfg = ZeroOrderConfig(rollout_length=64, n_rollouts=2, minibatch_size=64, update_epochs=1, lr=1e-3)
    hp = HyperParams(l_init=1, hidden=8)
    policy = SquashedGaussianPolicy(2, 2, hidden=8, seed=0)
    critic = Critic(2, hidden=8, seed=1)
    state = ZeroOrderState(
        agent=ObservationAgent(policy, np.zeros(2), np.ones(2)), critic=critic,
        global_model=SimulatorDynamics(linear_env), reward=GlobalReward("analytic", linear_env),
        data=linear_data, cfg=cfg, hp=hp,
        opt_policy=Adam(policy.parameters(), lr=cfg.lr), opt_critic=Adam(critic.parameters(), lr=cfg.lr),
        rng=np.random.default_rng(0),
    )
    before = [p.data.copy() for p in policy.parameters()]
    row = zeroth_order_epoch(state)
    assert row.env_samples == 128
    assert np.isnan(row.local_model_loss)
    assert np.isfinite(row.policy_loss) and np.isfinite(row.critic_loss)
    assert row.imagined_return < 0.0
    assert any(not np.array_equal(a, p.data) for a, p in zip(before, policy.parameters()))
    assert zeroth_order_epoch(state).env_samples == 256


def test_observation_agent_normalizes(tmp_path):
    policy = SquashedGaussianPolicy(2, 1, hidden=4)
    agent = ObservationAgent(policy, np.array([1.0, 2.0]), np.array([2.0, 4.0]))
    np.testing.assert_allclose(agent.features(np.array([3.0, 6.0])), [[1.0, 1.0]])
    agent.save(tmp_path / "norm")
    restored = ObservationAgent.load(policy, tmp_path / "norm")
    np.testing.assert_array_equal(restored.obs_std, [2.0, 4.0])
    assert agent.act(np.zeros(2)).shape == (1,)
