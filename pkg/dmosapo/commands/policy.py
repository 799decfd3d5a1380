import click

from dmosapo.commands.common import echo_summary, experiment_options


# ==========================================
# 1. DECOUPLED POLICY OPTIMIZATION
# ==========================================

@click.command("train-policy")
@experiment_options
def train_policy(pipeline):
    """
    Train the policy inside the learned models.

    - Observations come from the global model, gradients from the local model
    - Writes metrics.csv, eval.csv and policy/critic checkpoints
    """
    echo_summary("train-policy", pipeline.train_policy())


# ==========================================
# 2. BASELINES
# ==========================================

@click.command("baseline")
@click.option("--method", type=click.Choice(["zeroth_order", "no_diffusion"]), default=None,
              help="Defaults to baseline.method from the config.")
@experiment_options
def baseline(pipeline, method):
    """Clipped-surrogate policy gradient, or coupled first-order training on the local model alone."""
    echo_summary(f"baseline {method or pipeline.cfg.baseline.method.value}", pipeline.baseline(method))
