import logging
from typing import List, Optional

import click

from dmosapo.commands import analysis, data, models, pipeline, policy
from dmosapo.core.config import settings
from dmosapo.core.exceptions import DMOException

logger = logging.getLogger(__name__)


# ---------------------------------------------------------
# 1. LOGGING
# ---------------------------------------------------------
def configure_logging(level: Optional[str] = None):
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# ---------------------------------------------------------
# 2. APP
# ---------------------------------------------------------
@click.group(name=settings.APP_NAME, help="Decoupled first-order policy optimization in learned world models.")
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL from the environment.")
def app(log_level):
    configure_logging(log_level)


app.add_command(data.collect)
app.add_command(models.train_global)
app.add_command(models.train_reward)
app.add_command(models.pretrain_local)
app.add_command(policy.train_policy)
app.add_command(policy.baseline)
app.add_command(analysis.evaluate)
app.add_command(analysis.drift)
app.add_command(analysis.gradcheck)
app.add_command(analysis.curves)
app.add_command(pipeline.run)


# ---------------------------------------------------------
# 3. ENTRY POINT
# ---------------------------------------------------------
def cli(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns 0 on success, 1 on validation errors, 2 on runtime aborts."""
    try:
        result = app.main(args=argv, prog_name=settings.APP_NAME, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except DMOException as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        click.echo(f"Error: {e.detail}", err=True)
        return e.exit_code
    return result if isinstance(result, int) else 0
