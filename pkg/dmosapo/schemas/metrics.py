from typing import List, Optional

from pydantic import BaseModel


# ==========================================
# CSV ROW SCHEMAS
# ==========================================

class EpochMetrics(BaseModel):
    """One row of metrics.csv; shared by DMO-SAPO and both baselines."""
    epoch: int
    env_samples: int             # model transitions consumed so far
    wall_ms: float
    imagined_return: float
    policy_loss: float
    critic_loss: float
    entropy: float
    local_model_loss: float
    grad_norm_theta: float


class EvalMetrics(BaseModel):
    """One row of eval.csv (periodic true-environment evaluation)."""
    epoch: int
    env_samples: int
    wall_ms: float
    success_rate: float
    mean_return: float


METRIC_COLUMNS = list(EpochMetrics.model_fields)
EVAL_COLUMNS = list(EvalMetrics.model_fields)


# ==========================================
# STAGE REPORTS
# ==========================================

class GlobalTrainingReport(BaseModel):
    variant: str
    epochs: int
    train_loss: float
    holdout_mse: float
    holdout_delta_variance: float
    sigma_data: Optional[float] = None


class RewardTrainingReport(BaseModel):
    energy_spearman: Optional[float] = None
    energy_goal_above_start: Optional[float] = None
    intent_accuracy: Optional[float] = None
    intent_bce: Optional[float] = None
    shuffle_time: bool = False


class LocalTrainingReport(BaseModel):
    steps: int
    recon_mse: float
    obs_variance: float
    kl_below_free_bits: float
    reward_mse: float
    reward_variance: float


class TrajectoryMetrics(BaseModel):
    straightness: Optional[float]      # None for zero-length paths
    curvature: Optional[float]
    steps_to_success: Optional[int]


class EvaluationSummary(BaseModel):
    method: str
    n_episodes: int
    successes: int
    success_rate: float
    mean_straightness: Optional[float] = None
    mean_curvature: Optional[float] = None
    mean_steps_to_success: Optional[float] = None
    episodes: List[TrajectoryMetrics] = []


class DriftReport(BaseModel):
    variant: str
    steps: List[int]
    obs_error: List[float]
    obs_error_smoothed: List[float]
    block_error: Optional[List[float]] = None
    block_error_smoothed: Optional[List[float]] = None
    epistemic_std: Optional[List[float]] = None


class GradcheckResult(BaseModel):
    suite: str
    cases: int
    max_error: float
    tolerance: float
    passed: bool
