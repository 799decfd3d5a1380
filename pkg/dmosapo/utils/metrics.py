import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from dmosapo.core.exceptions import SchemaMismatchError
from dmosapo.envs.evaluation import EpisodeResult
from dmosapo.schemas.metrics import EvaluationSummary, TrajectoryMetrics

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["method", "x_kind", "x", "mean", "std"]
X_KINDS = {"samples": "env_samples", "wall_ms": "wall_ms"}


# ==========================================
# CSV LOGS
# ==========================================

class CsvLog:
    """Append-only CSV with a fixed column order; the header is written on ``start``."""

    def __init__(self, path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)

    def start(self) -> "CsvLog":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(columns=self.columns).to_csv(self.path, index=False)
        return self

    def append(self, row: BaseModel):
        frame = pd.DataFrame([row.model_dump()], columns=self.columns)
        frame.to_csv(self.path, mode="a", header=False, index=False)

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.path)


# ==========================================
# CURVES
# ==========================================

def emit_curves(runs: Dict[str, List], out_path=None, value: str = "imagined_return") -> pd.DataFrame:
    """Aggregate per-seed metric files into mean ± std curves.

    ``runs`` maps a method name to its per-seed CSV paths. Rows are grouped by
    epoch; every curve is emitted twice, indexed by samples and by wall-clock.
    """
    if not runs or any(not paths for paths in runs.values()):
        raise ValueError("emit_curves needs at least one metrics file per method")

    schema: Optional[List[str]] = None
    parts = []
    for method, paths in runs.items():
        tables = []
        for path in paths:
            table = pd.read_csv(path)
            columns = list(table.columns)
            if schema is None:
                schema = columns
            elif columns != schema:
                raise SchemaMismatchError(f"{path} has columns {columns}, expected {schema}")
            tables.append(table)
        if value not in schema or "epoch" not in schema:
            raise SchemaMismatchError(f"Metric files lack the 'epoch' or '{value}' column")

        grouped = pd.concat(tables, ignore_index=True).groupby("epoch", sort=True)
        mean = grouped[value].mean()
        std = grouped[value].std(ddof=0)
        for x_kind, column in X_KINDS.items():
            parts.append(pd.DataFrame({
                "method": method,
                "x_kind": x_kind,
                "x": grouped[column].mean().to_numpy(),
                "mean": mean.to_numpy(),
                "std": std.fillna(0.0).to_numpy(),
            }))

    curves = pd.concat(parts, ignore_index=True)[CURVE_COLUMNS]
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        curves.to_csv(out_path, index=False)
        logger.info(f"Wrote {len(curves)} curve rows to {out_path}")
    return curves


# ==========================================
# TRAJECTORY METRICS
# ==========================================

def traj_metrics(positions: np.ndarray, steps_to_success: Optional[int] = None) -> TrajectoryMetrics:
    """Straightness (displacement / path length) and curvature (Σ|Δheading| / path length)."""
    positions = np.asarray(positions, dtype=np.float64)
    segments = np.diff(positions, axis=0)
    lengths = np.linalg.norm(segments, axis=1)
    path = float(lengths.sum()) if len(lengths) else 0.0
    if path < 1e-12:
        return TrajectoryMetrics(straightness=None, curvature=None, steps_to_success=steps_to_success)

    displacement = float(np.linalg.norm(positions[-1] - positions[0]))
    moving = segments[lengths > 1e-12]
    headings = np.arctan2(moving[:, 1], moving[:, 0])
    turns = np.angle(np.exp(1j * np.diff(headings)))
    return TrajectoryMetrics(
        straightness=float(np.clip(displacement / path, 0.0, 1.0)),
        curvature=float(np.abs(turns).sum() / path),
        steps_to_success=steps_to_success,
    )


def summarize_evaluation(method: str, results: List[EpisodeResult]) -> EvaluationSummary:
    episodes = [traj_metrics(r.positions, r.steps_to_success) for r in results]

    def mean_of(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    successes = sum(r.success for r in results)
    # trajectory shape is only compared on episodes that reached the goal
    solved = [e for e, r in zip(episodes, results) if r.success]
    return EvaluationSummary(
        method=method,
        n_episodes=len(results),
        successes=successes,
        success_rate=successes / len(results) if results else 0.0,
        mean_straightness=mean_of(e.straightness for e in solved),
        mean_curvature=mean_of(e.curvature for e in solved),
        mean_steps_to_success=mean_of(e.steps_to_success for e in episodes),
        episodes=episodes,
    )
