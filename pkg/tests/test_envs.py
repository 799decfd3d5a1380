import numpy as np
import pytest

from dmosapo.envs import LinearEnv, PendulumEnv, PushEnv, build_env
from dmosapo.envs.evaluation import OracleAgent, ZeroAgent, rollout_eval, success_rate, true_success
from dmosapo.envs.push import AGENT_RADIUS, BLOCK_HALF, GOAL, EnvState, wrap_angle
from dmosapo.schemas.config import EnvConfig


def _state(agent, block, yaw=0.0):
    return EnvState(agent_pos=np.asarray(agent, dtype=float), block_pos=np.asarray(block, dtype=float),
                    block_yaw=yaw)


def test_build_env_selects_by_name():
    assert isinstance(build_env(EnvConfig(name="push")), PushEnv)
    assert isinstance(build_env(EnvConfig(name="pendulum")), PendulumEnv)
    assert isinstance(build_env(EnvConfig(name="linear")), LinearEnv)


def test_wrap_angle_range():
    for yaw in (-7.0, -np.pi, 0.0, np.pi, 4.0):
        wrapped = wrap_angle(yaw)
        assert -np.pi < wrapped <= np.pi
        assert np.isclose(np.cos(wrapped), np.cos(yaw))


def test_push_step_is_pure_and_deterministic():
    env = PushEnv()
    state = env.reset(np.random.default_rng(3))
    before = state.to_vector()
    a = env.step(state, np.array([0.3, -0.7]))
    b = env.step(state, np.array([0.3, -0.7]))
    np.testing.assert_array_equal(state.to_vector(), before)
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())
    assert a.step_index == state.step_index + 1


def test_centered_push_translates_block():
    env = PushEnv()
    start_x = 0.5 - BLOCK_HALF - AGENT_RADIUS - 0.01
    state = _state([start_x, 0.5], [0.5, 0.5])
    nxt = env.step(state, np.array([1.0, 0.0]))
    assert nxt.block_pos[0] > 0.5
    assert nxt.block_pos[1] == pytest.approx(0.5)
    assert nxt.block_yaw == pytest.approx(0.0)


def test_free_motion_leaves_block_alone():
    env = PushEnv()
    state = _state([0.1, 0.1], [0.6, 0.6], yaw=0.3)
    nxt = env.step(state, np.array([1.0, 0.0]))
    np.testing.assert_allclose(nxt.agent_pos, [0.15, 0.1])
    np.testing.assert_array_equal(nxt.block_pos, state.block_pos)


def test_state_observation_round_trip():
    env = PushEnv()
    state = _state([0.2, 0.3], [0.6, 0.4], yaw=0.5)
    obs = env.observe(state)
    assert obs.shape == (6,)
    back = env.state_from_observation(obs)
    np.testing.assert_allclose(back.to_vector(), state.to_vector())


def test_true_success_needs_position_and_yaw():
    env = PushEnv()
    assert true_success(env, _state([0.1, 0.1], GOAL + [0.04, 0.0], yaw=0.1))
    assert not true_success(env, _state([0.1, 0.1], GOAL + [0.06, 0.0]))
    assert not true_success(env, _state([0.1, 0.1], GOAL, yaw=0.3))


def test_raster_success_checks_position_only():
    state = _state([0.1, 0.1], GOAL, yaw=1.0)
    raster = PushEnv(observation="raster")
    obs = raster.observe(state)
    assert obs.shape == (256,)
    assert np.sum(obs == 1.0) == 1
    assert raster.success_from_observation(obs)
    assert not PushEnv().success_from_observation(PushEnv().observe(state))


def test_view_mask_hides_block_behind_agent():
    env = PushEnv(view_mask=True)
    # agent between the goal and the block, looking towards the goal
    state = _state([0.5, 0.3], [0.5, 0.15])
    obs = env.observe(state)
    np.testing.assert_array_equal(obs[2:], np.zeros(4))


def test_linear_env_dynamics():
    env = LinearEnv()
    state = env.state_from_vector(np.array([1.0, -1.0]))
    nxt = env.step(state, np.array([0.5, 0.5]))
    np.testing.assert_allclose(nxt.s, env.A @ state.s + env.B @ np.array([0.5, 0.5]))
    assert env.reward(np.zeros(2), np.zeros(2)) == 0.0


def test_pendulum_observation_is_unit_circle():
    env = PendulumEnv()
    state = env.reset(np.random.default_rng(0))
    for _ in range(20):
        state = env.step(state, np.array([1.0]))
    obs = env.observe(state)
    assert np.hypot(obs[0], obs[1]) == pytest.approx(1.0)
    assert abs(obs[2]) <= 1.0


def test_rollout_eval_with_reference_agents():
    env = LinearEnv()
    oracle = rollout_eval(env, OracleAgent(env), 3, 50, np.random.default_rng(0))
    idle = rollout_eval(env, ZeroAgent(env.action_dim), 3, 5, np.random.default_rng(0))
    assert success_rate(oracle) == 1.0
    assert all(r.steps_to_success is not None for r in oracle)
    assert all(len(r.positions) == 6 for r in idle)
