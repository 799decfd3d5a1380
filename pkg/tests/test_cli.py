import json

import numpy as np
import pandas as pd
import pytest

from dmosapo.core import autodiff as ad
from dmosapo.main import cli
from dmosapo.models.global_dynamics import EnsembleDynamics
from dmosapo.models.local import LocalWorldModel
from dmosapo.service.dmo_service import assert_gradient_free
from dmosapo.service.local_service import finetune_local, local_optimizer
from dmosapo.utils.replay import ReplayBuffer
from dmosapo.schemas.metrics import METRIC_COLUMNS, EpochMetrics
from dmosapo.utils.metrics import CsvLog
from tests.conftest import CONFIG_DIR

LINEAR = str(CONFIG_DIR / "linear.yaml")


def _collect(root, *extra):
    return cli(["collect", "--config", LINEAR, "--output-root", str(root), "--steps", "200", *extra])


def test_unknown_command_is_a_usage_error():
    assert cli(["no-such-stage"]) == 1


def test_missing_config_is_a_validation_error(tmp_path):
    assert cli(["collect", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_bad_override_is_a_validation_error(tmp_path):
    assert cli(["collect", "--config", LINEAR, "--output-root", str(tmp_path), "--set", "hp.horizen=3"]) == 1


def test_collect_is_byte_deterministic(tmp_path):
    assert _collect(tmp_path / "a") == 0
    assert _collect(tmp_path / "b") == 0
    first = tmp_path / "a" / "linear" / "collect" / "dataset"
    second = tmp_path / "b" / "linear" / "collect" / "dataset"
    for name in ("observations.f64", "actions.f64", "states.f64", "intent.u8"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    record = json.loads((tmp_path / "a" / "linear" / "collect" / "stage.json").read_text(encoding="utf-8"))
    assert record["summary"]["transitions"] == 200


def test_completed_stage_is_skipped_until_forced(tmp_path):
    assert _collect(tmp_path) == 0
    observations = tmp_path / "linear" / "collect" / "dataset" / "observations.f64"
    original = observations.read_bytes()
    observations.write_bytes(b"stale")

    assert _collect(tmp_path) == 0
    assert observations.read_bytes() == b"stale"

    assert _collect(tmp_path, "--force") == 0
    assert observations.read_bytes() == original


def test_changed_config_reruns_stage(tmp_path):
    assert _collect(tmp_path) == 0
    observations = tmp_path / "linear" / "collect" / "dataset" / "observations.f64"
    observations.write_bytes(b"stale")
    assert cli(["collect", "--config", LINEAR, "--output-root", str(tmp_path), "--steps", "200",
                "--seed", "1"]) == 0
    assert observations.read_bytes() != b"stale"


def test_oracle_evaluation_needs_no_training(tmp_path):
    assert cli(["eval", "--method", "oracle", "--episodes", "2", "--config", LINEAR,
                "--output-root", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "linear" / "eval" / "oracle" / "summary.json").read_text(encoding="utf-8"))
    assert summary["n_episodes"] == 2


def test_untrained_policy_cannot_be_evaluated(tmp_path):
    assert cli(["eval", "--method", "dmo", "--config", LINEAR, "--output-root", str(tmp_path)]) == 1


def test_curves_rejects_malformed_run(tmp_path):
    assert cli(["curves", "--run", "dmo", "--out", str(tmp_path / "c.csv")]) == 1


def test_curves_command(tmp_path):
    log = CsvLog(tmp_path / "metrics.csv", METRIC_COLUMNS).start()
    log.append(EpochMetrics(epoch=1, env_samples=4, wall_ms=1.0, imagined_return=-2.0, policy_loss=0.0,
                            critic_loss=0.0, entropy=0.0, local_model_loss=0.0, grad_norm_theta=0.0))
    out = tmp_path / "curves.csv"
    assert cli(["curves", "--run", f"dmo={log.path}", "--out", str(out)]) == 0
    assert len(pd.read_csv(out)) == 2


@pytest.mark.slow
def test_gradcheck_command():
    assert cli(["gradcheck", "--cases", "2"]) == 0


def _leak_into_global_model(make_state, tiny_hp, tiny_local_cfg):
    ensemble = EnsembleDynamics(2, 2, context_len=2, n_members=1, hidden=8)
    state = make_state(tiny_hp, global_model=ensemble)
    ad.backward(ad.vsum(ensemble.members[0](np.ones((1, 6)))))
    assert_gradient_free(state)


def _unroll_two_transitions(make_state, tiny_hp, tiny_local_cfg):
    local = LocalWorldModel(obs_dim=2, action_dim=2, h_dim=4, z_dim=2, hidden=8)
    step = local.transition
    local.transition = lambda latent, action, eps=None: step(step(latent, action), action)
    rng = np.random.default_rng(0)
    local.single_step_loss(h=np.zeros((3, 4)), obs=np.zeros((3, 2)), action=np.zeros((3, 2)),
                           next_obs=np.zeros((3, 2)), reward_target=np.zeros(3), eps=rng.normal(size=(2, 3, 2)))


def _finetune_on_empty_buffer(make_state, tiny_hp, tiny_local_cfg):
    local = LocalWorldModel(obs_dim=2, action_dim=2, h_dim=4, z_dim=2, hidden=8)
    opt = local_optimizer(local, tiny_local_cfg, 1e-3)
    finetune_local(local, opt, ReplayBuffer(8), None, tiny_local_cfg, np.random.default_rng(0))


@pytest.mark.parametrize("abort", [_leak_into_global_model, _unroll_two_transitions, _finetune_on_empty_buffer])
def test_structural_aborts_exit_with_two(monkeypatch, make_state, tiny_hp, tiny_local_cfg, abort):
    monkeypatch.setattr("dmosapo.commands.analysis.run_gradcheck",
                        lambda cases, seed: abort(make_state, tiny_hp, tiny_local_cfg))
    assert cli(["gradcheck", "--cases", "1"]) == 2
