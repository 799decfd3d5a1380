from functools import wraps
from pathlib import Path
from typing import Optional, Sequence

import click

from dmosapo.core.config import settings
from dmosapo.core.exceptions import ConfigValidationError
from dmosapo.schemas.config import ExperimentConfig
from dmosapo.service.pipeline import Pipeline


def experiment_options(fn):
    """--config / --set / --seed / --output-root / --force, shared by every stage command."""

    @click.option("--config", "-c", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="Experiment YAML (defaults to $DMO_CONFIG_DIR/push.yaml).")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override a config field by dotted path; repeatable.")
    @click.option("--seed", type=int, default=None, help="Top-level seed.")
    @click.option("--output-root", type=click.Path(file_okay=False), default=None,
                  help="Output root (defaults to $DMO_OUTPUT_ROOT).")
    @click.option("--force", is_flag=True, help="Rerun the stage even if it is up to date.")
    @wraps(fn)
    def wrapper(config_path, overrides, seed, output_root, force, **kwargs):
        cfg = load_experiment(config_path, overrides, seed)
        return fn(Pipeline(cfg, force=force, output_root=output_root), **kwargs)

    return wrapper


def load_experiment(config_path: Optional[str], overrides: Sequence[str] = (),
                    seed: Optional[int] = None) -> ExperimentConfig:
    if config_path is None:
        default = Path(settings.DMO_CONFIG_DIR) / "push.yaml"
        cfg = ExperimentConfig.from_yaml(default) if default.is_file() else ExperimentConfig()
    elif not Path(config_path).is_file():
        raise ConfigValidationError(f"Config file '{config_path}' not found")
    else:
        cfg = ExperimentConfig.from_yaml(Path(config_path))
    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={seed}")
    return cfg.with_overrides(extra) if extra else cfg


def echo_summary(title: str, summary: dict):
    click.echo(title)
    for key, value in summary.items():
        click.echo(f"  {key}: {value}")
