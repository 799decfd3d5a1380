"""
Stage orchestration: each stage writes into ``<output>/<stage>/`` and finishes by
writing a ``stage.json`` record keyed by a digest of the config sections it reads.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd

from dmosapo.core.config import settings
from dmosapo.core.exceptions import CheckpointFormatError, ConfigValidationError, UnknownComponentError
from dmosapo.envs import build_env
from dmosapo.envs.evaluation import OracleAgent, ZeroAgent, rollout_eval
from dmosapo.envs.play_data import PlayDataset, collect_play, load_dataset, save_dataset
from dmosapo.models.global_dynamics import GlobalDynamics, SimulatorDynamics, load_global
from dmosapo.models.local import LocalWorldModel
from dmosapo.models.policy import LatentAgent, SquashedGaussianPolicy
from dmosapo.models.reward import EnergyModel, GlobalReward, IntentRewardHead
from dmosapo.schemas.config import ExperimentConfig, Stage
from dmosapo.schemas.metrics import RewardTrainingReport
from dmosapo.schemas.stage import StageRecord
from dmosapo.service.baseline_service import ObservationAgent, run_no_diffusion, run_zeroth_order
from dmosapo.service.dmo_service import run_dmo
from dmosapo.service.global_service import rollout_drift, train_global
from dmosapo.service.local_service import pretrain_local
from dmosapo.service.reward_service import train_energy, train_intent_head
from dmosapo.utils.metrics import summarize_evaluation
from dmosapo.utils.seeding import rng_for, stage_seed

logger = logging.getLogger(__name__)

STAGE_FILE = "stage.json"

# Config sections each stage reads, upstream sections included
STAGE_SECTIONS: Dict[str, List[str]] = {
    "collect": ["seed", "env", "collect", "paths"],
    "train-global": ["seed", "env", "collect", "paths", "global_model"],
    "train-reward": ["seed", "env", "collect", "paths", "global_model", "reward"],
    "pretrain-local": ["seed", "env", "collect", "paths", "global_model", "reward", "local_model", "hp"],
}
FULL_SECTIONS = ["seed", "env", "collect", "paths", "global_model", "reward", "local_model", "hp", "baseline"]

EVAL_METHODS = ["dmo", "zeroth_order", "no_diffusion", "oracle", "zero"]


def stage_digest(cfg: ExperimentConfig, stage: str) -> str:
    sections = STAGE_SECTIONS.get(stage.split("/")[0], FULL_SECTIONS)
    dump = cfg.model_dump(mode="json", include=set(sections))
    canonical = json.dumps(dump, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, force: bool = False, output_root: Optional[str] = None):
        self.cfg = cfg
        self.force = force
        root = Path(output_root or settings.DMO_OUTPUT_ROOT)
        self.output_dir = Path(cfg.paths.output_dir) if cfg.paths.output_dir else root / cfg.name
        self.env = build_env(cfg.env)

    # ── stage bookkeeping ───────────────────────────────────────

    def stage_dir(self, stage: str) -> Path:
        return self.output_dir / stage

    def record(self, stage: str) -> Optional[StageRecord]:
        path = self.stage_dir(stage) / STAGE_FILE
        if not path.is_file():
            return None
        return StageRecord.model_validate_json(path.read_text(encoding="utf-8"))

    def is_complete(self, stage: str) -> bool:
        rec = self.record(stage)
        return rec is not None and rec.digest == stage_digest(self.cfg, stage)

    def _run(self, stage: str, body: Callable[[Path], dict]) -> dict:
        if self.is_complete(stage) and not self.force:
            logger.info(f"Stage '{stage}' is up to date; skipping (use --force to rerun)")
            return self.record(stage).summary
        directory = self.stage_dir(stage)
        directory.mkdir(parents=True, exist_ok=True)
        logger.info(f"Running stage '{stage}' into {directory}")
        summary = body(directory)
        rec = StageRecord(stage=stage, digest=stage_digest(self.cfg, stage), summary=summary)
        (directory / STAGE_FILE).write_text(rec.model_dump_json(indent=2), encoding="utf-8")
        return summary

    # ── loaders ─────────────────────────────────────────────────

    @property
    def dataset_dir(self) -> Path:
        return Path(self.cfg.paths.dataset) if self.cfg.paths.dataset else self.stage_dir("collect") / "dataset"

    def dataset(self) -> PlayDataset:
        data = load_dataset(self.dataset_dir)
        if data.env != self.env.name:
            raise ConfigValidationError(
                f"Dataset at {self.dataset_dir} was collected on '{data.env}', config selects '{self.env.name}'"
            )
        return data

    def global_model(self) -> GlobalDynamics:
        if getattr(self.cfg.global_model.variant, "value", self.cfg.global_model.variant) == "simulator":
            return SimulatorDynamics(self.env)
        return load_global(self.stage_dir("train-global") / "global")

    def reward_model(self) -> GlobalReward:
        kind = getattr(self.cfg.reward.kind, "value", self.cfg.reward.kind)
        directory = self.stage_dir("train-reward")
        if kind == "energy":
            return GlobalReward(kind, self.env, energy=EnergyModel.load(directory / "energy"))
        if kind == "intent":
            return GlobalReward(kind, self.env, intent=IntentRewardHead.load(directory / "intent"))
        return GlobalReward(kind, self.env)

    def local_model(self) -> LocalWorldModel:
        return LocalWorldModel.load(self.stage_dir("pretrain-local") / "local")

    # ── stages ──────────────────────────────────────────────────

    def collect(self) -> dict:
        cfg = self.cfg

        def body(directory: Path) -> dict:
            c = cfg.collect
            data = collect_play(
                self.env, c.policy, c.n_steps, cfg.seed, rng_for(cfg.seed, "collect"),
                action_noise=c.action_noise, max_episode_len=c.max_episode_len,
                wander_range=(c.wander_min, c.wander_max), push_max=c.push_max,
                env_config=cfg.env.model_dump(mode="json"),
            )
            save_dataset(data, self.dataset_dir)
            return {"episodes": len(data.episodes), "transitions": data.n_transitions,
                    "intent_fraction": data.intent_fraction}

        return self._run(Stage.COLLECT.value, body)

    def train_global(self) -> dict:
        def body(directory: Path) -> dict:
            model, report = train_global(self.dataset(), self.cfg.global_model,
                                         stage_seed(self.cfg.seed, "global"), env=self.env)
            if not isinstance(model, SimulatorDynamics):
                model.save(directory / "global")
            return report.model_dump(mode="json")

        return self._run(Stage.TRAIN_GLOBAL.value, body)

    def train_reward(self) -> dict:
        cfg = self.cfg

        def body(directory: Path) -> dict:
            kind = getattr(cfg.reward.kind, "value", cfg.reward.kind)
            seed = stage_seed(cfg.seed, "reward")
            data = self.dataset()
            report = RewardTrainingReport(shuffle_time=cfg.reward.shuffle_time)
            if kind == "energy":
                model, stats = train_energy(data, self.env, cfg.reward, seed)
                model.save(directory / "energy")
                report = RewardTrainingReport(**stats)
            elif kind == "intent":
                head, stats = train_intent_head(self.global_model(), data, self.env, cfg.reward, seed)
                head.save(directory / "intent")
                report = RewardTrainingReport(**stats)
            return report.model_dump(mode="json")

        return self._run(Stage.TRAIN_REWARD.value, body)

    def pretrain_local(self) -> dict:
        cfg = self.cfg

        def body(directory: Path) -> dict:
            lcfg = cfg.local_model
            data = self.dataset()
            local = LocalWorldModel(data.obs_dim, data.action_dim, lcfg.h_dim, lcfg.z_dim, lcfg.hidden,
                                    lcfg.cell, seed=stage_seed(cfg.seed, "local", "init"))
            reward = self.reward_model()
            global_model = self.global_model() if reward.needs_features else None
            local, report = pretrain_local(local, data, reward, global_model, lcfg,
                                           stage_seed(cfg.seed, "local"), start_lag=cfg.hp.horizon // 2)
            local.save(directory / "local")
            return report.model_dump(mode="json")

        return self._run(Stage.PRETRAIN_LOCAL.value, body)

    def train_policy(self) -> dict:
        def body(directory: Path) -> dict:
            _, _, frame = run_dmo(self.cfg, self.env, self.dataset(), self.global_model(),
                                  self.reward_model(), self.local_model(), directory)
            return _tail_summary(frame)

        return self._run(Stage.TRAIN_POLICY.value, body)

    def baseline(self, method: Optional[str] = None) -> dict:
        method = method or getattr(self.cfg.baseline.method, "value", self.cfg.baseline.method)

        def body(directory: Path) -> dict:
            if method == "zeroth_order":
                _, _, frame = run_zeroth_order(self.cfg, self.env, self.dataset(), self.global_model(),
                                               self.reward_model(), directory)
            elif method == "no_diffusion":
                _, _, frame = run_no_diffusion(self.cfg, self.env, self.dataset(), self.reward_model(),
                                               self.local_model(), directory)
            else:
                raise UnknownComponentError("baseline", method, ["zeroth_order", "no_diffusion"])
            return _tail_summary(frame)

        return self._run(f"{Stage.BASELINE.value}/{method}", body)

    def agent(self, method: str):
        if method == "oracle":
            return OracleAgent(self.env)
        if method == "zero":
            return ZeroAgent(self.env.action_dim)
        if method == "dmo":
            directory = self.stage_dir(Stage.TRAIN_POLICY.value)
        elif method in ("zeroth_order", "no_diffusion"):
            directory = self.stage_dir(f"{Stage.BASELINE.value}/{method}")
        else:
            raise UnknownComponentError("evaluation method", method, EVAL_METHODS)
        if not (directory / "policy.json").is_file():
            raise CheckpointFormatError(f"No trained policy for '{method}' under {directory}")
        policy = SquashedGaussianPolicy.load(directory / "policy")
        if method == "zeroth_order":
            return ObservationAgent.load(policy, directory / "obs_normalizer")
        return LatentAgent(policy, LocalWorldModel.load(directory / "local_finetuned"))

    def evaluate(self, method: str = "dmo", episodes: Optional[int] = None) -> dict:
        def body(directory: Path) -> dict:
            results = rollout_eval(self.env, self.agent(method), episodes or self.cfg.hp.eval_episodes,
                                   self.env.episode_len, rng_for(self.cfg.seed, "eval", method))
            summary = summarize_evaluation(method, results)
            (directory / "summary.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
            return summary.model_dump(mode="json", exclude={"episodes"})

        return self._run(f"{Stage.EVAL.value}/{method}", body)

    def drift(self, n_steps: int = 60, n_starts: int = 8) -> dict:
        def body(directory: Path) -> dict:
            report = rollout_drift(self.global_model(), self.env, self.dataset(), n_steps, n_starts,
                                   stage_seed(self.cfg.seed, "drift"))
            (directory / "drift.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
            columns = {k: v for k, v in report.model_dump().items() if isinstance(v, list)}
            pd.DataFrame(columns).to_csv(directory / "drift.csv", index=False)
            return {"variant": report.variant, "final_obs_error": report.obs_error_smoothed[-1]}

        return self._run(Stage.DRIFT.value, body)

    def run(self, stages: Optional[List[str]] = None) -> Dict[str, dict]:
        """Run the enabled stages in pipeline order."""
        order = [s.value for s in Stage]
        wanted = stages or [getattr(s, "value", s) for s in self.cfg.stages.enabled]
        handlers = {
            Stage.COLLECT.value: self.collect,
            Stage.TRAIN_GLOBAL.value: self.train_global,
            Stage.TRAIN_REWARD.value: self.train_reward,
            Stage.PRETRAIN_LOCAL.value: self.pretrain_local,
            Stage.TRAIN_POLICY.value: self.train_policy,
            Stage.BASELINE.value: self.baseline,
            Stage.EVAL.value: self.evaluate,
            Stage.DRIFT.value: self.drift,
        }
        results = {}
        for stage in sorted(wanted, key=order.index):
            results[stage] = handlers[stage]()
        return results


def _tail_summary(frame: pd.DataFrame) -> dict:
    if frame.empty:
        return {"epochs": 0}
    last = frame.iloc[-1]
    return {"epochs": int(last["epoch"]), "env_samples": int(last["env_samples"]),
            "final_imagined_return": float(last["imagined_return"])}
