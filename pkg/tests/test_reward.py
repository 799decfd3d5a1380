import numpy as np
import pytest

from dmosapo.core import autodiff as ad
from dmosapo.core.exceptions import DegenerateLabelsError, NoGoalSegmentsError, UnknownComponentError
from dmosapo.envs import build_env
from dmosapo.envs.linear import LinearEnv
from dmosapo.envs.play_data import collect_play
from dmosapo.models.reward import EnergyModel, GlobalReward, IntentRewardHead, bt_loss_from_energies, reward_infer
from dmosapo.schemas.config import ExperimentConfig, RewardConfig
from dmosapo.service.reward_service import evaluate_energy, spearman, train_energy, train_intent_head
from dmosapo.utils.seeding import rng_for, stage_seed
from tests.conftest import CONFIG_DIR


def test_equal_energies_give_log_two():
    loss = bt_loss_from_energies(np.zeros(2), np.zeros(2), np.array([0, 1]), np.array([1, 0]))
    assert loss.item() == pytest.approx(np.log(2.0))


def test_identical_indices_are_skipped():
    loss = bt_loss_from_energies(np.array([5.0]), np.array([-5.0]), np.array([2]), np.array([2]))
    assert loss.item() == 0.0


def test_later_frame_with_higher_energy_lowers_the_loss():
    i, j = np.array([0]), np.array([3])
    ordered = bt_loss_from_energies(np.array([0.0]), np.array([2.0]), i, j).item()
    reversed_ = bt_loss_from_energies(np.array([2.0]), np.array([0.0]), i, j).item()
    assert ordered < np.log(2.0) < reversed_


def test_bt_gradient_pushes_later_energy_up():
    model = EnergyModel(2, hidden=8, seed=0)
    s_i, s_j = np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]])
    loss = model.bt_loss(s_i, s_j, np.array([0]), np.array([1]), np.zeros((1, 2)), np.ones((1, 2)))
    ad.backward(loss)
    assert any(p.has_grad for p in model.parameters())


def test_energy_reward_is_bounded():
    model = EnergyModel(2, hidden=8, seed=0)
    r = model.reward(np.random.default_rng(0).normal(size=(10, 2)) * 100.0, np.zeros(2), np.ones(2))
    assert r.shape == (10,)
    assert np.all(np.abs(r) <= 1.0)


def test_untrained_intent_head_is_uninformative():
    head = IntentRewardHead(2, 2, hidden=8)
    p = head.probability(np.zeros((3, 2)), np.zeros((3, 2)))
    np.testing.assert_allclose(p, 0.5)
    assert head.bce(np.zeros((1, 2)), np.zeros((1, 2)), [1.0]).item() == pytest.approx(np.log(2.0))


def test_intent_head_with_features_requires_them():
    head = IntentRewardHead(2, 2, feature_dim=3, hidden=8)
    with pytest.raises(ValueError):
        head.probability(np.zeros((1, 2)), np.zeros((1, 2)))
    assert GlobalReward("intent", LinearEnv(), intent=head).needs_features


def test_milestone_bonus_in_model_space():
    env = LinearEnv()
    head = IntentRewardHead(2, 2, hidden=8, milestone_bonus=10.0)
    np.testing.assert_array_equal(head.milestone(env, np.array([[0.0, 0.0], [1.0, 1.0]])), [10.0, 0.0])
    reward = GlobalReward("intent", env, intent=head)
    np.testing.assert_allclose(reward.infer(np.zeros((1, 2)), np.zeros((1, 2))), [10.5])


def test_analytic_reward_matches_environment():
    env = LinearEnv()
    reward = GlobalReward("analytic", env)
    out = reward.infer(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(out, [-1.0 - env.action_cost])
    assert not reward.needs_features
    np.testing.assert_array_equal(reward_infer(reward, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])), out)


def test_reward_kind_validation():
    with pytest.raises(UnknownComponentError):
        GlobalReward("learned", LinearEnv())
    with pytest.raises(ValueError):
        GlobalReward("energy", LinearEnv())


def test_spearman():
    assert spearman(np.arange(5), np.arange(5) ** 3) == pytest.approx(1.0)
    assert spearman(np.arange(5), -np.arange(5)) == pytest.approx(-1.0)
    assert np.isnan(spearman(np.ones(4), np.arange(4)))
    assert spearman([3.0, 1.0, 2.0, 2.0], [30.0, 10.0, 25.0, 25.0]) == pytest.approx(1.0)


def test_random_play_has_no_goal_segments(linear_data):
    with pytest.raises(NoGoalSegmentsError):
        train_energy(linear_data, LinearEnv(), RewardConfig(energy_steps=1), seed=0)


def test_single_class_labels_rejected(linear_data):
    with pytest.raises(DegenerateLabelsError):
        train_intent_head(None, linear_data, LinearEnv(), RewardConfig(intent_epochs=1), seed=0)


@pytest.fixture(scope="module")
def scripted_play():
    return collect_play(LinearEnv(), "scripted", 1500, 0, np.random.default_rng(0), max_episode_len=100)


def test_energy_training_on_scripted_play(scripted_play):
    cfg = RewardConfig(hidden=8, energy_steps=20, pair_batch=16, goal_tolerance=0.15, holdout=0.2)
    model, stats = train_energy(scripted_play, LinearEnv(), cfg, seed=0)
    assert model.trained_steps == 20
    assert model.energy_std > 0
    assert 0.0 <= stats["energy_goal_above_start"] <= 1.0
    rho, above = evaluate_energy(model, [scripted_play.episodes[0].observations[:10]])
    assert np.isnan(rho) or abs(rho) <= 1.0 + 1e-9


def test_intent_training_on_scripted_play(scripted_play):
    cfg = RewardConfig(hidden=8, intent_epochs=1, intent_batch=128)
    head, stats = train_intent_head(None, scripted_play, LinearEnv(), cfg, seed=0)
    assert head.feature_dim == 0
    assert 0.0 <= stats["intent_accuracy"] <= 1.0
    assert np.isfinite(stats["intent_bce"])


# ==========================================
# Learned rewards on scripted push play
# ==========================================

@pytest.fixture(scope="module")
def push_play():
    cfg = ExperimentConfig.from_yaml(CONFIG_DIR / "push.yaml").with_overrides(["collect.n_steps=10000"])
    c = cfg.collect
    env = build_env(cfg.env)
    data = collect_play(env, c.policy, c.n_steps, cfg.seed, rng_for(cfg.seed, "collect"),
                        action_noise=c.action_noise, max_episode_len=c.max_episode_len,
                        wander_range=(c.wander_min, c.wander_max), push_max=c.push_max)
    return cfg, env, data


@pytest.mark.slow
def test_energy_ranks_frames_by_time_to_goal(push_play):
    cfg, env, data = push_play
    _, stats = train_energy(data, env, cfg.reward, stage_seed(cfg.seed, "reward"))
    assert stats["energy_spearman"] >= 0.8


@pytest.mark.slow
def test_shuffled_time_energy_is_uninformative(push_play):
    cfg, env, data = push_play
    shuffled = cfg.reward.model_copy(update={"shuffle_time": True})
    _, stats = train_energy(data, env, shuffled, stage_seed(cfg.seed, "reward"))
    assert abs(stats["energy_spearman"]) < 0.2


@pytest.mark.slow
def test_intent_head_separates_goal_directed_steps(push_play):
    cfg, env, data = push_play
    _, stats = train_intent_head(None, data, env, cfg.reward, stage_seed(cfg.seed, "reward"))
    assert stats["intent_accuracy"] >= 0.85
