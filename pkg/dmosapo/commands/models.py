import click

from dmosapo.commands.common import echo_summary, experiment_options


# ==========================================
# 1. GLOBAL FORWARD MODEL
# ==========================================

@click.command("train-global")
@experiment_options
def train_global(pipeline):
    """Fit the global forward model (few-step denoiser or ensemble) on play data."""
    echo_summary("train-global", pipeline.train_global())


# ==========================================
# 2. GLOBAL REWARD
# ==========================================

@click.command("train-reward")
@experiment_options
def train_reward(pipeline):
    """
    Learn the global reward from play data.

    - energy: Bradley-Terry ranking inside goal-reaching segments
    - intent: intent classifier plus milestone bonus
    - analytic: nothing to train
    """
    echo_summary("train-reward", pipeline.train_reward())


# ==========================================
# 3. LOCAL BACKWARD MODEL
# ==========================================

@click.command("pretrain-local")
@experiment_options
def pretrain_local(pipeline):
    """Single-step pretraining of the local latent model with global-reward targets."""
    echo_summary("pretrain-local", pipeline.pretrain_local())
