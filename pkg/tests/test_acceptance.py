import numpy as np
import pandas as pd
import pytest

from dmosapo.schemas.config import ExperimentConfig
from dmosapo.service.pipeline import Pipeline
from tests.conftest import CONFIG_DIR

# Full push budget; far beyond the default suite, so only run with -m acceptance
pytestmark = [pytest.mark.slow, pytest.mark.acceptance]

TRAINING_STAGES = ["collect", "train-global", "train-reward", "pretrain-local", "train-policy"]
EVAL_EPISODES = 10


@pytest.fixture(scope="module")
def push_run(tmp_path_factory):
    cfg = ExperimentConfig.from_yaml(CONFIG_DIR / "push.yaml")
    pipeline = Pipeline(cfg, output_root=str(tmp_path_factory.mktemp("push")))
    pipeline.run(TRAINING_STAGES)
    for method in ("zeroth_order", "no_diffusion"):
        pipeline.baseline(method)
    summaries = {m: pipeline.evaluate(m, episodes=EVAL_EPISODES)
                 for m in ("dmo", "zeroth_order", "no_diffusion")}
    return pipeline, summaries


def _samples_to_reach(eval_csv, success: float) -> float:
    frame = pd.read_csv(eval_csv)
    reached = frame[frame["success_rate"] >= success]
    return float(reached["env_samples"].iloc[0]) if len(reached) else np.inf


def test_dmo_solves_push_and_beats_the_coupled_ablation(push_run):
    _, summaries = push_run
    assert summaries["dmo"]["successes"] >= 8
    assert summaries["no_diffusion"]["successes"] < summaries["dmo"]["successes"]


def test_dmo_needs_a_third_of_the_zeroth_order_samples(push_run):
    pipeline, _ = push_run
    dmo = _samples_to_reach(pipeline.stage_dir("train-policy") / "eval.csv", 0.8)
    zeroth = _samples_to_reach(pipeline.stage_dir("baseline/zeroth_order") / "eval.csv", 0.8)
    assert np.isfinite(dmo)
    assert dmo <= zeroth / 3


def test_dmo_pushes_straighter_than_zeroth_order(push_run):
    _, summaries = push_run
    dmo, zeroth = summaries["dmo"], summaries["zeroth_order"]
    assert dmo["successes"] >= 3 and zeroth["successes"] >= 3
    assert dmo["mean_straightness"] > zeroth["mean_straightness"]
    assert dmo["mean_curvature"] < zeroth["mean_curvature"]
