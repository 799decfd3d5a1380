from collections import defaultdict

import click

from dmosapo.commands.common import echo_summary, experiment_options
from dmosapo.core.exceptions import ConfigValidationError, GradientCheckFailedError
from dmosapo.service.gradcheck_service import run_gradcheck
from dmosapo.service.pipeline import EVAL_METHODS
from dmosapo.utils.metrics import emit_curves


# ==========================================
# 1. EVALUATION IN THE TRUE ENVIRONMENT
# ==========================================

@click.command("eval")
@click.option("--method", type=click.Choice(EVAL_METHODS), default="dmo")
@click.option("--episodes", type=int, default=None, help="Defaults to hp.eval_episodes.")
@experiment_options
def evaluate(pipeline, method, episodes):
    """Success rate, straightness, curvature and steps-to-success from randomized starts."""
    echo_summary(f"eval {method}", pipeline.evaluate(method, episodes))


# ==========================================
# 2. OPEN-LOOP DRIFT
# ==========================================

@click.command("drift")
@click.option("--steps", type=int, default=60, show_default=True)
@click.option("--starts", type=int, default=8, show_default=True)
@experiment_options
def drift(pipeline, steps, starts):
    """Open-loop prediction error of the global model under recorded actions."""
    echo_summary("drift", pipeline.drift(steps, starts))


# ==========================================
# 3. GRADIENT ORACLES
# ==========================================

@click.command("gradcheck")
@click.option("--cases", type=int, default=100, show_default=True, help="Randomized cases per primitive.")
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck(cases, seed):
    """Run every gradient oracle suite; exits non-zero if any is over tolerance."""
    results = run_gradcheck(cases, seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        click.echo(f"{r.suite:<20} {r.cases:>6} cases  max rel. error {r.max_error:.3e}  "
                   f"(tol {r.tolerance:.0e})  {status}")
    failed = [r.suite for r in results if not r.passed]
    if failed:
        raise GradientCheckFailedError(failed)


# ==========================================
# 4. PLOT-READY CURVES
# ==========================================

@click.command("curves")
@click.option("--run", "runs", multiple=True, required=True, metavar="METHOD=CSV",
              help="A metrics file for one seed of a method; repeatable.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--value", default="imagined_return", show_default=True, help="Column to aggregate.")
def curves(runs, out_path, value):
    """Aggregate per-seed metric CSVs into mean ± std curves over samples and wall-clock."""
    grouped = defaultdict(list)
    for item in runs:
        if "=" not in item:
            raise ConfigValidationError(f"--run '{item}' is not of the form METHOD=CSV")
        method, path = item.split("=", 1)
        grouped[method].append(path)
    frame = emit_curves(dict(grouped), out_path, value=value)
    click.echo(f"Wrote {len(frame)} rows for {len(grouped)} method(s) to {out_path}")
