import click

from dmosapo.commands.common import echo_summary, experiment_options


# ==========================================
# 1. COLLECT PLAY DATA
# ==========================================

@click.command("collect")
@click.option("--steps", type=int, default=None, help="Number of transitions (collect.n_steps).")
@experiment_options
def collect(pipeline, steps):
    """
    Roll the scripted collector in the true environment and write a play dataset.

    - Alternates random wandering with goal-directed segments
    - Same config and seed give a byte-identical dataset
    """
    if steps is not None:
        pipeline.cfg = pipeline.cfg.with_overrides([f"collect.n_steps={steps}"])
    echo_summary("collect", pipeline.collect())
