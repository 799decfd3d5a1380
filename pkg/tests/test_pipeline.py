import pandas as pd
import pytest

from dmosapo.schemas.config import ExperimentConfig
from dmosapo.schemas.metrics import EVAL_COLUMNS, METRIC_COLUMNS
from dmosapo.service.pipeline import Pipeline, stage_digest
from tests.conftest import CONFIG_DIR, TINY_OVERRIDES

pytestmark = pytest.mark.slow

BASELINE_OVERRIDES = [
    "baseline.rollout_length=64",
    "baseline.n_rollouts=2",
    "baseline.minibatch_size=64",
    "baseline.update_epochs=1",
    "baseline.epochs=1",
]
TRAINING_STAGES = ["collect", "train-global", "train-reward", "pretrain-local", "train-policy"]


def tiny_config(*extra) -> ExperimentConfig:
    cfg = ExperimentConfig.from_yaml(CONFIG_DIR / "linear.yaml")
    return cfg.with_overrides(TINY_OVERRIDES + BASELINE_OVERRIDES + list(extra))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    pipeline = Pipeline(tiny_config(), output_root=str(tmp_path_factory.mktemp("runs")))
    pipeline.run(TRAINING_STAGES)
    return pipeline


def test_policy_stage_writes_metrics_and_checkpoints(trained):
    directory = trained.stage_dir("train-policy")
    metrics = pd.read_csv(directory / "metrics.csv")
    assert list(metrics.columns) == METRIC_COLUMNS
    assert metrics["epoch"].tolist() == [1, 2]
    assert metrics["env_samples"].tolist() == [16, 32]
    assert list(pd.read_csv(directory / "eval.csv").columns) == EVAL_COLUMNS
    for stem in ("policy", "critic", "local_finetuned"):
        assert (directory / f"{stem}.json").is_file()
    assert trained.record("train-policy").summary["epochs"] == 2


def test_trained_policy_can_be_evaluated(trained):
    summary = trained.evaluate("dmo", episodes=2)
    assert summary["n_episodes"] == 2
    assert 0.0 <= summary["success_rate"] <= 1.0


@pytest.mark.parametrize("method", ["zeroth_order", "no_diffusion"])
def test_baselines_run_on_the_same_artifacts(trained, method):
    summary = trained.baseline(method)
    assert summary["epochs"] >= 1
    assert trained.evaluate(method, episodes=1)["n_episodes"] == 1


def test_completed_stages_are_skipped(trained):
    stamps = {s: (trained.stage_dir(s) / "stage.json").stat().st_mtime_ns for s in TRAINING_STAGES}
    again = Pipeline(trained.cfg, output_root=str(trained.output_dir.parent))
    assert all(again.is_complete(s) for s in TRAINING_STAGES)
    again.run(TRAINING_STAGES)
    assert stamps == {s: (again.stage_dir(s) / "stage.json").stat().st_mtime_ns for s in TRAINING_STAGES}


def test_digest_tracks_only_upstream_sections(trained):
    changed = Pipeline(tiny_config("hp.epochs=3"), output_root=str(trained.output_dir.parent))
    for stage in ("collect", "train-global", "train-reward"):
        assert changed.is_complete(stage)
    for stage in ("pretrain-local", "train-policy"):
        assert not changed.is_complete(stage)
    assert stage_digest(trained.cfg, "baseline/zeroth_order") != stage_digest(changed.cfg, "baseline/zeroth_order")


def test_pendulum_imagined_return_improves(tmp_path):
    cfg = ExperimentConfig.from_yaml(CONFIG_DIR / "pendulum.yaml").with_overrides(["hp.eval_every=0"])
    pipeline = Pipeline(cfg, output_root=str(tmp_path))
    pipeline.run(TRAINING_STAGES)
    returns = pd.read_csv(pipeline.stage_dir("train-policy") / "metrics.csv")["imagined_return"].dropna()
    assert len(returns) >= 100
    assert returns.tail(20).mean() > returns.head(20).mean()
