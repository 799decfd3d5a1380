import numpy as np
import pytest

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.core.exceptions import (
    ConfigValidationError,
    EmptyReplayBufferError,
    GradientLeakError,
    TrainingDivergedError,
)
from dmosapo.models.global_dynamics import EnsembleDynamics, SimulatorDynamics
from dmosapo.models.linear import LinearBackwardModel, LinearPolicy
from dmosapo.models.local import Latent
from dmosapo.schemas.config import HyperParams
from dmosapo.service.dmo_service import (
    ImaginedTrajectory,
    assert_gradient_free,
    critic_loss,
    critic_targets,
    imagine,
    sapo_policy_loss,
    train_epoch,
)
from dmosapo.utils.replay import ReplayBuffer, TransitionBatch
from dmosapo.utils.seeding import rng_for, stage_seed


class ConstantCritic:
    def __init__(self, value: float):
        self.value = value

    def __call__(self, features) -> Value:
        return Value(np.full(ad.as_value(features).shape[0], self.value))


class NanDynamics:
    """Global model stand-in whose predictions are never finite."""

    context_len = 1

    def handle(self, seed=0):
        return self

    def prefill(self, windows):
        self.context = np.asarray(windows)[:, -1:]
        return self

    def predict(self, action):
        return np.full((len(action), 2), np.nan)


def _windows(data, hp, batch=None):
    return np.stack(data.sample_windows(np.random.default_rng(0), hp.l_init, batch or hp.batch_size))


def _manual_trajectory(local_rewards, batch=1):
    horizon = len(local_rewards)
    latents = [Latent(Value(np.zeros((batch, 1))), Value(np.zeros((batch, 0)))) for _ in range(horizon + 1)]
    return ImaginedTrajectory(
        observations=np.zeros((horizon + 1, batch, 1)),
        latents=latents,
        actions=[Value(np.zeros((batch, 1))) for _ in range(horizon)],
        global_rewards=np.ones((horizon, batch)),
        local_rewards=[Value(np.full(batch, r)) for r in local_rewards],
        entropies=[Value(np.zeros(batch)) for _ in range(horizon)],
    )


# ==========================================
# IMAGINATION
# ==========================================

def test_imagine_shapes(make_state, tiny_hp, linear_data):
    state = make_state(tiny_hp)
    traj = imagine(state.policy, state.global_model, state.local, _windows(linear_data, tiny_hp), tiny_hp,
                   np.random.default_rng(1), reward=state.reward)
    assert traj.horizon == 4 and traj.batch == 4
    assert traj.observations.shape == (5, 4, 2)
    assert len(traj.latents) == 5
    assert traj.global_rewards.shape == (4, 4)
    assert all(r.shape == (4,) for r in traj.local_rewards)
    assert len(traj.transitions()) == 16


def test_horizon_one_is_single_transition(make_state, linear_data):
    hp = HyperParams(horizon=1, l_init=1, batch_size=3, hidden=8)
    state = make_state(hp)
    traj = imagine(state.policy, state.global_model, state.local, _windows(linear_data, hp), hp,
                   np.random.default_rng(0), reward=state.reward)
    assert traj.horizon == 1 and len(traj.latents) == 2
    # no reward terms, only the bootstrap at l_1
    loss = sapo_policy_loss(traj, state.critic, hp)
    expected = -np.mean(state.critic(traj.latents[0].features()).data) * hp.gamma
    assert loss.item() == pytest.approx(expected)


def test_anchored_latents_equal_global_observations(linear_env, linear_data):
    hp = HyperParams(horizon=6, l_init=1, batch_size=5, hidden=8)
    local = LinearBackwardModel(linear_env.A, linear_env.B)
    policy = LinearPolicy(2, 2, np.random.default_rng(0))
    traj = imagine(policy, SimulatorDynamics(linear_env), local, _windows(linear_data, hp), hp,
                   np.random.default_rng(0))
    for h in range(hp.horizon + 1):
        np.testing.assert_array_equal(traj.latents[h].h.data, traj.observations[h])


def test_only_decoupled_rollouts_carry_anchors(make_state, tiny_hp, linear_data):
    windows = _windows(linear_data, tiny_hp)
    for coupled in (False, True):
        state = make_state(tiny_hp, coupled=coupled)
        with state.local.frozen():
            traj = imagine(state.policy, state.global_model, state.local, windows, tiny_hp,
                           np.random.default_rng(0), reward=state.reward, coupled=coupled)
            kinds = ad.Tape.record(sapo_policy_loss(traj, state.critic, tiny_hp)).kinds()
        assert ("anchor" in kinds) is not coupled
        assert traj.anchored is not coupled


def test_decoupled_rollout_needs_global_model(make_state, tiny_hp, linear_data):
    state = make_state(tiny_hp)
    with pytest.raises(ConfigValidationError):
        imagine(state.policy, None, state.local, _windows(linear_data, tiny_hp), tiny_hp,
                np.random.default_rng(0))


# ==========================================
# LOSSES
# ==========================================

def test_policy_loss_discounting():
    traj = _manual_trajectory([1.0, 2.0, 3.0])
    hp = HyperParams(gamma=0.5, alpha=0.0)
    # -(0.5·1 + 0.25·2 + 0.125·10); R̂_H never enters
    loss = sapo_policy_loss(traj, ConstantCritic(10.0), hp)
    assert loss.item() == pytest.approx(-2.25)


def test_entropy_bonus_is_weighted_by_alpha():
    traj = _manual_trajectory([0.0, 0.0])
    traj.entropies = [Value(np.ones(1)), Value(np.ones(1))]
    loss = sapo_policy_loss(traj, ConstantCritic(0.0), HyperParams(gamma=0.5, alpha=0.2))
    assert loss.item() == pytest.approx(-0.5 * 0.2)


def test_critic_loss_sums_over_horizon():
    traj = _manual_trajectory([0.0, 0.0, 0.0])
    loss = critic_loss(traj, ConstantCritic(0.0), np.full((1, 1), 2.0))
    assert loss.item() == pytest.approx(4.0)
    loss = critic_loss(traj, ConstantCritic(0.0), np.full((2, 1), 2.0))
    assert loss.item() == pytest.approx(8.0)


def test_critic_targets_use_global_rewards():
    traj = _manual_trajectory([5.0, 5.0, 5.0])
    hp = HyperParams(gamma=0.5, lam=0.0)
    targets = critic_targets(traj, ConstantCritic(2.0), hp)
    # one-step targets r + γV with r = 1 from the global model
    np.testing.assert_allclose(targets, np.full((2, 1), 2.0))


def test_critic_update_touches_only_the_critic(make_state, tiny_hp, linear_data):
    state = make_state(tiny_hp)
    traj = imagine(state.policy, state.global_model, state.local, _windows(linear_data, tiny_hp), tiny_hp,
                   np.random.default_rng(0), reward=state.reward)
    loss = critic_loss(traj, state.critic, critic_targets(traj, state.critic, tiny_hp))
    ad.backward(loss)
    assert all(p.has_grad for p in state.critic.parameters())
    assert not any(p.has_grad for p in state.policy.parameters())
    assert not any(p.has_grad for p in state.local.parameters())


# ==========================================
# TRAINING EPOCH
# ==========================================

def test_epoch_metrics(make_state, tiny_hp):
    state = make_state(tiny_hp)
    first = train_epoch(state)
    assert first.epoch == 1
    assert first.env_samples == tiny_hp.horizon * tiny_hp.batch_size
    assert np.isnan(first.local_model_loss)
    assert np.isfinite(first.policy_loss) and np.isfinite(first.critic_loss)
    second = train_epoch(state)
    assert np.isfinite(second.local_model_loss)
    assert len(state.buffer) == 2 * tiny_hp.horizon * tiny_hp.batch_size


def test_zero_learning_rates_leave_parameters_unchanged(make_state):
    hp = HyperParams(horizon=4, l_init=2, batch_size=4, hidden=8, lr_policy=0.0, lr_critic=0.0, lr_local=0.0)
    state = make_state(hp)
    before = [p.data.copy() for m in (state.policy, state.critic, state.local) for p in m.parameters()]
    for _ in range(2):
        train_epoch(state)
    after = [p.data for m in (state.policy, state.critic, state.local) for p in m.parameters()]
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic(make_state, tiny_hp):
    runs = []
    for _ in range(2):
        state = make_state(tiny_hp, seed=3)
        rows = [train_epoch(state) for _ in range(2)]
        runs.append(np.array([[r.imagined_return, r.policy_loss, r.critic_loss, r.entropy,
                               r.local_model_loss, r.grad_norm_theta] for r in rows]))
    np.testing.assert_array_equal(runs[0], runs[1])


def test_global_model_stays_gradient_free(make_state, tiny_hp):
    ensemble = EnsembleDynamics(2, 2, context_len=2, n_members=2, hidden=8)
    state = make_state(tiny_hp, global_model=ensemble)
    train_epoch(state)
    assert not any(p.has_grad for p in ensemble.parameters())


def test_gradient_in_the_global_model_aborts(make_state, tiny_hp):
    ensemble = EnsembleDynamics(2, 2, context_len=2, n_members=1, hidden=8)
    state = make_state(tiny_hp, global_model=ensemble)
    assert_gradient_free(state)
    ad.backward(ad.vsum(ensemble.members[0](np.ones((1, 6)))))
    with pytest.raises(GradientLeakError, match="EnsembleDynamics"):
        assert_gradient_free(state)


def test_non_finite_latents_skip_then_abort(make_state):
    hp = HyperParams(horizon=2, l_init=1, batch_size=2, hidden=8, max_skips=2)
    state = make_state(hp, global_model=NanDynamics())
    row = train_epoch(state)
    assert np.isnan(row.policy_loss)
    assert state.consecutive_skips == 1
    assert row.env_samples == 0
    with pytest.raises(TrainingDivergedError):
        train_epoch(state)


def test_coupled_state_trains(make_state, tiny_hp):
    state = make_state(tiny_hp, coupled=True)
    row = train_epoch(state)
    assert state.global_model is None
    assert np.isfinite(row.policy_loss)


# ==========================================
# REPLAY & SEEDING
# ==========================================

def _batch(values):
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    return TransitionBatch(h=values[:, None], obs=np.zeros((n, 2)), action=np.zeros((n, 2)),
                           next_obs=np.zeros((n, 2)), reward=values)


def test_replay_buffer_is_fifo():
    buffer = ReplayBuffer(4)
    buffer.add(_batch([1, 2, 3]))
    buffer.add(_batch([4, 5]))
    assert len(buffer) == 4
    assert sorted(buffer._data.reward) == [2, 3, 4, 5]
    buffer.add(_batch([6, 7, 8, 9, 10]))
    assert sorted(buffer._data.reward) == [7, 8, 9, 10]


def test_empty_buffer_cannot_sample():
    with pytest.raises(EmptyReplayBufferError):
        ReplayBuffer(2).sample(np.random.default_rng(0), 1)


def test_seed_streams_are_keyed():
    a = rng_for(7, "train", "epochs").standard_normal(3)
    b = rng_for(7, "train", "epochs").standard_normal(3)
    c = rng_for(7, "train", "init").standard_normal(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert stage_seed(7, "x") == stage_seed(7, "x") != stage_seed(8, "x")
