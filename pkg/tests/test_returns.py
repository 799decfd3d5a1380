import numpy as np
import pytest

from dmosapo.utils.returns import gae, lambda_returns, lambda_returns_direct, n_step_return


def test_lambda_zero_is_one_step_target():
    targets = lambda_returns(np.array([1.0, 1.0]), np.array([0.0, 0.0, 5.0]), 0.9, 0.0)
    np.testing.assert_allclose(targets, [1.0, 1.0 + 0.9 * 5.0])


def test_lambda_one_is_bootstrapped_monte_carlo():
    targets = lambda_returns(np.array([1.0, 1.0]), np.array([0.0, 0.0, 5.0]), 0.9, 1.0)
    np.testing.assert_allclose(targets, [1.0 + 0.9 * 1.0 + 0.81 * 5.0, 1.0 + 0.9 * 5.0])


def test_recursion_matches_double_sum():
    rewards, values = np.array([1.0, 1.0]), np.array([0.0, 0.0, 5.0])
    fast = lambda_returns(rewards, values, 0.9, 0.5)
    direct = lambda_returns_direct(rewards, values, 0.9, 0.5)
    np.testing.assert_allclose(fast, direct, rtol=0, atol=1e-12)
    # (1 - λ)·V^(1) + λ·V^(2) at t = 1
    assert fast[0] == pytest.approx(0.5 * 1.0 + 0.5 * (1.0 + 0.9 + 0.81 * 5.0))


def test_recursion_matches_double_sum_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(50):
        steps = int(rng.integers(1, 10))
        rewards = rng.normal(size=(steps, 3))
        values = rng.normal(size=(steps + 1, 3))
        gamma, lam = float(rng.uniform(0.1, 0.99)), float(rng.uniform())
        np.testing.assert_allclose(lambda_returns(rewards, values, gamma, lam),
                                   lambda_returns_direct(rewards, values, gamma, lam), atol=1e-12)


def test_length_mismatch():
    with pytest.raises(ValueError):
        lambda_returns(np.zeros(3), np.zeros(3), 0.9, 0.5)


def test_n_step_return():
    assert n_step_return(np.array([1.0, 2.0]), np.array([0.0, 0.0, 4.0]), 0, 2, 0.5) == pytest.approx(1 + 1 + 1)


def test_gae_with_unit_lambda_is_return_minus_value():
    rewards = np.array([1.0, 0.0, 2.0])
    values = np.array([0.5, 0.2, -0.1, 3.0])
    adv, ret = gae(rewards, values, 1.0, 1.0)
    np.testing.assert_allclose(ret, [6.0, 5.0, 5.0])
    np.testing.assert_allclose(adv, ret - values[:-1])
