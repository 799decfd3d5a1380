import click

from dmosapo.commands.common import echo_summary, experiment_options
from dmosapo.schemas.config import Stage


@click.command("run")
@click.option("--stage", "stages", multiple=True, type=click.Choice([s.value for s in Stage]),
              help="Stages to run; defaults to stages.enabled from the config.")
@experiment_options
def run(pipeline, stages):
    """Run the pipeline stages in order, skipping the ones already up to date."""
    for stage, summary in pipeline.run(list(stages) or None).items():
        echo_summary(stage, summary)
