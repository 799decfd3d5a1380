# dmosapo/schemas/config.py

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dmosapo.core.exceptions import ConfigValidationError


class Section(BaseModel):
    """Every config section rejects unknown keys."""
    model_config = ConfigDict(extra="forbid")


# ==========================================
# ENUMS
# ==========================================

class CollectionPolicy(str, Enum):
    SCRIPTED = "scripted"
    RANDOM = "random"


class GlobalVariant(str, Enum):
    ENSEMBLE = "ensemble"
    DENOISER = "denoiser"
    SIMULATOR = "simulator"     # oracle wiring only


class RewardKind(str, Enum):
    ENERGY = "energy"
    INTENT = "intent"
    ANALYTIC = "analytic"       # true environment reward (pendulum / linear smoke runs)


class BaselineMethod(str, Enum):
    ZEROTH_ORDER = "zeroth_order"
    NO_DIFFUSION = "no_diffusion"


class Stage(str, Enum):
    COLLECT = "collect"
    TRAIN_GLOBAL = "train-global"
    TRAIN_REWARD = "train-reward"
    PRETRAIN_LOCAL = "pretrain-local"
    TRAIN_POLICY = "train-policy"
    BASELINE = "baseline"
    EVAL = "eval"
    DRIFT = "drift"


# ==========================================
# SECTIONS
# ==========================================

class EnvConfig(Section):
    name: Literal["push", "pendulum", "linear"] = "push"
    observation: Literal["state", "raster"] = "state"
    shape: Literal["square", "t"] = "square"
    view_mask: bool = False
    episode_len: int = Field(400, gt=0)


class CollectConfig(Section):
    policy: CollectionPolicy = CollectionPolicy.SCRIPTED
    n_steps: int = Field(10000, gt=0)
    action_noise: float = Field(0.1, ge=0.0)
    max_episode_len: int = Field(400, gt=0, le=400)
    wander_min: int = Field(10, gt=0)
    wander_max: int = Field(40, gt=0)
    push_max: int = Field(150, gt=0)     # cap on one goal-directed segment

    @model_validator(mode="after")
    def check_wander_range(self):
        if self.wander_min > self.wander_max:
            raise ValueError("collect.wander_min must not exceed collect.wander_max")
        return self


class GlobalModelConfig(Section):
    variant: GlobalVariant = GlobalVariant.DENOISER
    context_len: int = Field(4, ge=1)
    hidden: int = Field(128, gt=0)
    feature_dim: int = Field(64, gt=0)
    n_members: int = Field(5, ge=1)
    denoise_steps: int = Field(3, ge=1)
    sigma_min: float = Field(0.002, gt=0.0)    # in units of sigma_data
    sigma_max: float = Field(5.0, gt=0.0)
    rho: float = Field(7.0, gt=0.0)
    p_mean: float = -0.4
    schedule_mix: float = Field(0.5, ge=0.0, le=1.0)   # share of training sigmas drawn from the sampler levels
    p_std: float = Field(1.2, gt=0.0)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(256, gt=0)
    lr: float = Field(1e-3, ge=0.0)
    min_transitions: int = Field(10000, ge=1)
    holdout: float = Field(0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_sigmas(self):
        if self.sigma_min >= self.sigma_max:
            raise ValueError("global_model.sigma_min must be below sigma_max")
        return self


class RewardConfig(Section):
    kind: RewardKind = RewardKind.ENERGY
    hidden: int = Field(64, gt=0)
    energy_steps: int = Field(2000, ge=0)
    pair_batch: int = Field(128, gt=0)
    goal_tolerance: float = Field(0.1, gt=0.0)
    shuffle_time: bool = False          # null ablation: destroys temporal order
    intent_epochs: int = Field(20, ge=0)
    intent_batch: int = Field(256, gt=0)
    milestone_bonus: float = 10.0
    use_global_features: bool = True
    lr: float = Field(1e-3, ge=0.0)
    holdout: float = Field(0.1, ge=0.0, lt=1.0)


class LocalModelConfig(Section):
    cell: Literal["gru", "linear"] = "gru"
    h_dim: int = Field(64, gt=0)
    z_dim: int = Field(16, gt=0)
    hidden: int = Field(128, gt=0)
    free_bits: float = Field(1.0, ge=0.0)
    kl_scale: float = Field(1.0, ge=0.0)
    recon_scale: float = Field(1.0, ge=0.0)
    reward_scale: float = Field(1.0, ge=0.0)
    pretrain_steps: int = Field(2000, ge=0)
    batch_size: int = Field(64, gt=0)
    lr: float = Field(3e-4, ge=0.0)
    freeze_encoder: bool = False
    play_mix: float = Field(0.5, ge=0.0, le=1.0)
    holdout: float = Field(0.1, ge=0.0, lt=1.0)


class HyperParams(Section):
    gamma: float = Field(0.99, gt=0.0, lt=1.0)
    lam: float = Field(0.95, ge=0.0, le=1.0)
    alpha: float = Field(0.01, ge=0.0)
    horizon: int = Field(64, ge=1)
    l_init: int = Field(32, ge=1)
    lr_policy: float = Field(3e-4, ge=0.0)
    lr_critic: float = Field(3e-4, ge=0.0)
    lr_local: float = Field(3e-4, ge=0.0)
    hidden: int = Field(64, gt=0)
    batch_size: int = Field(64, gt=0)
    epochs: int = Field(200, ge=0)
    model_mini_epochs: int = Field(1, ge=0)
    grad_clip: Optional[float] = Field(10.0, gt=0.0)
    truncate_bptt: Optional[int] = Field(None, ge=1)
    buffer_capacity: int = Field(100_000, gt=0)
    eval_every: int = Field(10, ge=0)         # 0 disables periodic evaluation
    eval_episodes: int = Field(10, gt=0)
    max_skips: int = Field(3, ge=1)


class ZeroOrderConfig(Section):
    method: BaselineMethod = BaselineMethod.ZEROTH_ORDER
    clip_ratio: float = Field(0.2, gt=0.0)
    update_epochs: int = Field(4, ge=1)
    gae_lambda: float = Field(0.95, ge=0.0, le=1.0)
    rollout_length: Literal[64, 128] = 128
    minibatch_size: int = Field(256, gt=0)
    n_rollouts: int = Field(64, gt=0)
    lr: float = Field(3e-4, ge=0.0)
    ent_coef: float = Field(0.0, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    epochs: int = Field(200, ge=0)


class PathsConfig(Section):
    output_dir: Optional[str] = None    # defaults to $DMO_OUTPUT_ROOT/<name>
    dataset: Optional[str] = None       # defaults to <output_dir>/collect/dataset


class StagesConfig(Section):
    enabled: List[Stage] = Field(
        default_factory=lambda: [
            Stage.COLLECT, Stage.TRAIN_GLOBAL, Stage.TRAIN_REWARD,
            Stage.PRETRAIN_LOCAL, Stage.TRAIN_POLICY, Stage.EVAL,
        ]
    )


# ==========================================
# EXPERIMENT
# ==========================================

class ExperimentConfig(Section):
    """
    One experiment: environment, every model section, hyperparameters and seeds.
    Loaded from YAML; CLI ``--set a.b=value`` overrides are revalidated here.
    """
    name: str = "push"
    seed: int = Field(0, ge=0)
    env: EnvConfig = Field(default_factory=EnvConfig)
    collect: CollectConfig = Field(default_factory=CollectConfig)
    global_model: GlobalModelConfig = Field(default_factory=GlobalModelConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    local_model: LocalModelConfig = Field(default_factory=LocalModelConfig)
    hp: HyperParams = Field(default_factory=HyperParams)
    baseline: ZeroOrderConfig = Field(default_factory=ZeroOrderConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    stages: StagesConfig = Field(default_factory=StagesConfig)

    @field_validator("name")
    def validate_name(cls, v):
        if not v or "/" in v:
            raise ValueError("name must be a non-empty path segment")
        return v

    # ── (de)serialization ───────────────────────────────────────

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            return cls.model_validate(data or {})
        except ValidationError as e:
            raise ConfigValidationError(_format_errors(e)) from None

    @classmethod
    def from_yaml(cls, text_or_path) -> "ExperimentConfig":
        if isinstance(text_or_path, Path) or (
            isinstance(text_or_path, str) and "\n" not in text_or_path and Path(text_or_path).is_file()
        ):
            text = Path(text_or_path).read_text(encoding="utf-8")
        else:
            text = str(text_or_path)
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"Config is not valid YAML: {e}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigValidationError("Config root must be a mapping")
        return cls.from_dict(data)

    def with_overrides(self, overrides: List[str]) -> "ExperimentConfig":
        """Apply ``dotted.path=value`` overrides; values are parsed as YAML scalars."""
        data = self.model_dump(mode="json")
        for item in overrides:
            if "=" not in item:
                raise ConfigValidationError(f"Override '{item}' is not of the form key=value")
            path, raw = item.split("=", 1)
            keys = path.strip().split(".")
            node: Any = data
            for key in keys[:-1]:
                if not isinstance(node, dict) or key not in node:
                    raise ConfigValidationError(f"Unknown config path '{path}'")
                node = node[key]
            if not isinstance(node, dict) or keys[-1] not in node:
                raise ConfigValidationError(f"Unknown config path '{path}'")
            node[keys[-1]] = yaml.safe_load(raw)
        return ExperimentConfig.from_dict(data)

    def digest(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _format_errors(error: ValidationError) -> str:
    parts = []
    for err in error.errors():
        loc = ".".join(str(x) for x in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "Invalid configuration: " + "; ".join(parts)
