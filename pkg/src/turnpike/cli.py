"""Command line entry point: ``turnpike simulate|solve|sweep|verify CONFIG``.

Exit codes: 0 success, 1 validation error, 2 solver failure, 3 certificate
failure.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from . import harness
from .errors import InvalidInputError

log = logging.getLogger("turnpike")


def _common(f):
    f = click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a config key, e.g. model.n_agents=50 (repeatable).")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                     help="Output directory (overrides run.output_dir).")(f)
    f = click.option("--seed", type=int, default=None, help="RNG seed (overrides run.seed).")(f)
    f = click.argument("config", type=click.Path(dir_okay=False))(f)
    return f


def _load(config, overrides, seed, out, extra=()):
    try:
        return harness.load_config(config, overrides=[*overrides, *extra], seed=seed, output_dir=out)
    except InvalidInputError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(harness.EXIT_VALIDATION)


def _finish(report: harness.RunReport) -> None:
    s = report.summary
    click.echo(f"mode={report.mode} N={s['n_agents']} h={s['h']} M={s['m_steps']} J={s['J']:.10g} "
               f"final_L_N={s['final_L_N']:.6g}")
    fit = s["decay_fit"]
    if fit["ratio"] is not None:
        click.echo(f"decay ratio per step {fit['ratio']:.10g} (R^2={fit['r_squared']:.8f})")
    if report.certificate is not None:
        c = report.certificate
        click.echo(f"turnpike certificate: tail_sum={c['tail_sum']:.6g} bound={c['bound']:.6g} "
                   f"passed={c['passed']}")
    if report.diagnostics:
        click.echo(report.diagnostics, err=True)
    sys.exit(report.exit_code)


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Discrete-time multi-agent optimal control with turnpike certificates."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
@click.option("--mode", type=click.Choice(["uncontrolled", "cheap"]), default=None,
              help="Run mode (defaults to run.mode from the config).")
def simulate(config, overrides, seed, out, mode):
    """Uncontrolled or cheap-control rollout."""
    extra = [f'run.mode="{mode}"'] if mode else []
    cfg = _load(config, overrides, seed, out, extra)
    if cfg.mode == "optimal":
        click.echo("error: run.mode: simulate runs 'uncontrolled' or 'cheap'; use `solve`", err=True)
        sys.exit(harness.EXIT_VALIDATION)
    try:
        report = harness.run_experiment(cfg)
    except InvalidInputError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(harness.EXIT_VALIDATION)
    _finish(report)


@main.command()
@_common
def solve(config, overrides, seed, out):
    """Solve the optimal control problem and write its turnpike certificate."""
    cfg = _load(config, overrides, seed, out, ['run.mode="optimal"'])
    try:
        report = harness.run_experiment(cfg)
    except InvalidInputError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(harness.EXIT_VALIDATION)
    _finish(report)


@main.command()
@_common
@click.option("--workers", type=int, default=1, show_default=True, help="Parallel sweep entries.")
def sweep(config, overrides, seed, out, workers):
    """Run a sweep over beta, h or n_agents and write sweep.csv."""
    cfg = _load(config, overrides, seed, out)
    try:
        reports, rows = harness.run_sweep(cfg, workers=workers)
    except InvalidInputError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(harness.EXIT_VALIDATION)
    for row in rows:
        click.echo(", ".join(f"{k}={v}" for k, v in row.items()))
    codes = [r.exit_code if r is not None else harness.EXIT_SOLVER for r in reports]
    sys.exit(max(codes))


@main.command("verify")
@_common
def verify_cmd(config, overrides, seed, out):
    """Run dissipativity, cheap-control and turnpike checks on the optimal solution."""
    cfg = _load(config, overrides, seed, out)
    try:
        result = harness.verify(cfg)
    except InvalidInputError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(harness.EXIT_VALIDATION)
    summary = {k: result[k]["passed"] for k in ("dissipativity", "cheap_control_optimal",
                                                  "cheap_control_closed_loop", "certificate", "uniformity")
               if k in result}
    summary["control_bound"] = result["control_bound"]["status"]
    click.echo(json.dumps(summary, sort_keys=True))
    sys.exit(result["exit_code"])


if __name__ == "__main__":
    main()
