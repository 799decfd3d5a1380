import numpy as np
from dmosapo.core import autodiff as ad
from dmosapo.models.policy import LOG_STD_MIN, Critic, LatentAgent, SquashedGaussianPolicy, tanh_log_det


def test_tanh_log_det_is_stable():
    u = np.array([-50.0, -1.0, 0.0, 2.0, 50.0])
    out = tanh_log_det(u).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[1:4], np.log(1.0 - np.tanh(u[1:4]) ** 2))


def test_actions_are_squashed_and_entropy_matches_log_prob():
    policy = SquashedGaussianPolicy(4, 2, hidden=8, seed=0)
    rng = np.random.default_rng(0)
    features = rng.normal(size=(6, 4))
    action, entropy = policy(features, rng.normal(size=(6, 2)))
    assert np.all(np.abs(action.data) < 1.0)
    assert entropy.shape == (6,)
    np.testing.assert_allclose(entropy.data, -policy.log_prob(features, action.data).data, rtol=1e-6, atol=1e-9)


def test_reparameterized_gradient_reaches_parameters():
    policy = SquashedGaussianPolicy(4, 2, hidden=8, seed=0)
    action, entropy = policy(np.ones((3, 4)), np.ones((3, 2)))
    ad.backward(ad.vsum(action) + ad.vsum(entropy))
    assert all(p.has_grad for p in policy.parameters())


def test_log_std_floor_bounds_entropy_from_below():
    policy = SquashedGaussianPolicy(2, 1, hidden=4, seed=0)
    _, log_std = policy.stats(np.zeros((1, 2)))
    assert log_std.data.min() >= LOG_STD_MIN


def test_mode_is_deterministic():
    policy = SquashedGaussianPolicy(3, 2, hidden=8, seed=1)
    f = np.ones((2, 3))
    np.testing.assert_array_equal(policy.mode(f), policy.mode(f))
    assert policy.mode(f).shape == (2, 2)


def test_critic_is_scalar_per_sample():
    assert Critic(5, hidden=8)(np.zeros((7, 5))).shape == (7,)


def test_latent_agent_filters_observations(tiny_local):
    policy = SquashedGaussianPolicy(tiny_local.feature_dim, 2, hidden=8, seed=0)
    agent = LatentAgent(policy, tiny_local)
    agent.reset(np.zeros(2))
    first = agent.act(np.zeros(2))
    second = agent.act(np.array([0.3, -0.2]))
    assert first.shape == (2,) and second.shape == (2,)
    assert not any(p.has_grad for p in tiny_local.parameters())

