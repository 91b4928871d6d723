#!/usr/bin/env python3
"""
eefwq - energy-efficient federated learning with flexible weight quantization.

Usage:
    eefwq solve --out allocation.json
    eefwq sweep --out-dir results/
    eefwq simulate --out trace.csv
    eefwq fit traces/ --out fit.json
    eefwq verify --grid-h 32
"""

import sys
from pathlib import Path
from typing import Optional

import click

from eefwq.config import load_config
from eefwq.convergence import fit_coeffs
from eefwq.errors import InfeasibleError
from eefwq.flsim import run_fwq_fl
from eefwq.formatter import (
    format_allocation,
    format_fit_result,
    format_sweep_summary,
    format_trace_summary,
    format_verify_result,
)
from eefwq.harness import StrategyKind, run_strategy, summarize, sweep
from eefwq.results import RunManifest, allocation_record, read_traces, write_csv, write_json, write_trace
from eefwq.solver import brute_force, iterate

EXIT_INFEASIBLE = 2

_STRATEGIES = [s.value for s in StrategyKind]


def _load(ctx):
    config_path = ctx.obj["config_path"]
    app_config = load_config(config_path, seed=ctx.obj["seed"])
    cli_strings = app_config.strings.get("cli", {})
    if config_path:
        click.echo(cli_strings.get("loading", "Loading configuration {path}...").format(path=config_path), err=True)
    return app_config, cli_strings, app_config.strings.get("formatter", {})


def _manifest(command: str, app_config) -> RunManifest:
    return RunManifest(command=command, config_digest=app_config.digest, seed=app_config.seed,
                       config=app_config.raw)


def _infeasible(e: InfeasibleError) -> None:
    click.echo(f"Infeasible ({e.constraint}): {e}", err=True)
    sys.exit(EXIT_INFEASIBLE)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=False),
    default=None,
    help="Path to configuration file. Defaults to the shipped defaults.",
)
@click.option(
    "--seed",
    type=int,
    default=None,
    help="Root seed. Overrides EEFWQ_SEED and the config.",
)
@click.pass_context
def cli(ctx, config_path: Optional[str], seed: Optional[int]) -> None:
    """
    eefwq - Plan bit-widths, local steps and bandwidth for energy-efficient FL.

    Exit codes: 0 success, 2 infeasible scenario, 1 any other error.
    """
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed


@cli.command()
@click.option("--out", type=click.Path(), default="allocation.json", help="Allocation record (JSON).")
@click.option("--strategy", type=click.Choice(_STRATEGIES), default="fwq", help="Strategy to solve with.")
@click.pass_context
def solve(ctx, out: str, strategy: str) -> None:
    """
    Solve one scenario and write the allocation record.

    Examples:
        eefwq solve
        eefwq --config scenario.yaml solve --out alloc.json --strategy unifiedq
    """
    try:
        app_config, cli_strings, fmt_strings = _load(ctx)
        manifest = _manifest("solve", app_config)
        scenario = app_config.scenario()
        click.echo(cli_strings.get("solving", "Solving with strategy {strategy} ({n} devices)...").format(
            strategy=strategy, n=scenario.n), err=True)

        result = run_strategy(StrategyKind(strategy), scenario, app_config.seed, app_config.settings)
        if result.allocation is None or not result.feasible:
            click.echo(f"{cli_strings.get('infeasible', 'Infeasible')} ({result.constraint or '-'}): {result.note}",
                       err=True)
            sys.exit(EXIT_INFEASIBLE)

        out_path = Path(out)
        record = allocation_record(scenario, result.allocation, strategy, app_config.seed)
        outputs = [write_json(out_path, record)]
        outputs.append(manifest.finish(outputs).write(out_path.with_name(out_path.stem + ".manifest.json")))
        for path in outputs:
            click.echo(cli_strings.get("written", "Written: {path}").format(path=path), err=True)

        click.echo("", err=True)
        click.echo(format_allocation(result.allocation, fmt_strings, strategy))

    except InfeasibleError as e:
        _infeasible(e)
    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@cli.command("sweep")
@click.option("--out-dir", type=click.Path(), default="results", help="Directory for CSV results.")
@click.option("--strategy", "strategies", type=click.Choice(_STRATEGIES), multiple=True,
              help="Strategies to run (repeatable). Defaults to the config list.")
@click.pass_context
def sweep_cmd(ctx, out_dir: str, strategies: tuple[str, ...]) -> None:
    """
    Run a parameter sweep over generated scenarios.

    Examples:
        eefwq sweep --out-dir results/
        eefwq --config fig6.yaml sweep --strategy fwq --strategy unifiedq
    """
    try:
        app_config, cli_strings, fmt_strings = _load(ctx)
        manifest = _manifest("sweep", app_config)
        spec = app_config.sweep_spec(strategies=list(strategies) or None)
        click.echo(cli_strings.get("sweeping", "Running {kind} sweep: {points} points x {repeats} seeds...").format(
            kind=spec.kind, points=len(spec.values), repeats=spec.repeats), err=True)

        table = sweep(spec, app_config.settings, workers=app_config.workers)
        summary = summarize(table)

        directory = Path(out_dir)
        outputs = [
            write_csv(directory / f"sweep_{spec.kind}.csv", table),
            write_csv(directory / f"summary_{spec.kind}.csv", summary),
        ]
        outputs.append(manifest.finish(outputs).write(directory / f"manifest_{spec.kind}.json"))
        for path in outputs:
            click.echo(cli_strings.get("written", "Written: {path}").format(path=path), err=True)

        click.echo("", err=True)
        click.echo(format_sweep_summary(summary, fmt_strings, spec.kind))

    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option("--out", type=click.Path(), default="trace.csv", help="Trace CSV.")
@click.pass_context
def simulate(ctx, out: str) -> None:
    """
    Run quantized federated training and write its trace.

    Examples:
        eefwq simulate --out traces/q16.csv
    """
    try:
        app_config, cli_strings, fmt_strings = _load(ctx)
        manifest = _manifest("simulate", app_config)
        sim = app_config.simulation
        click.echo(cli_strings.get("simulating", "Simulating {rounds} rounds on {n} devices...").format(
            rounds=sim.rounds, n=sim.n_devices), err=True)

        trace = run_fwq_fl(sim)
        out_path = Path(out)
        outputs = write_trace(out_path, trace)
        outputs.append(manifest.finish(outputs).write(out_path.with_name(out_path.stem + ".manifest.json")))
        for path in outputs:
            click.echo(cli_strings.get("written", "Written: {path}").format(path=path), err=True)

        click.echo("", err=True)
        click.echo(format_trace_summary(trace, fmt_strings))

    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.argument("traces_dir", type=click.Path())
@click.option("--out", type=click.Path(), default="fit.json", help="Fitted coefficients (JSON).")
@click.option("--targets", type=str, default=None,
              help="Comma-separated gradient-norm targets. Defaults to the config list.")
@click.pass_context
def fit(ctx, traces_dir: str, out: str, targets: Optional[str]) -> None:
    """
    Fit the convergence coefficients a1, a2, a3 from training traces.

    Examples:
        eefwq fit traces/ --targets 0.5,0.2,0.1
    """
    try:
        app_config, cli_strings, fmt_strings = _load(ctx)
        manifest = _manifest("fit", app_config)
        target_list = [float(t) for t in targets.split(",")] if targets else app_config.fit_targets
        traces = read_traces(traces_dir)
        click.echo(cli_strings.get("fitting", "Fitting coefficients from {count} traces...").format(
            count=len(traces)), err=True)

        coeffs = app_config.template.coeffs
        result = fit_coeffs(traces, target_list, eps=coeffs.eps, s_scale=coeffs.s_scale)
        out_path = Path(out)
        outputs = [write_json(out_path, {
            "a1": result.coeffs.a1,
            "a2": result.coeffs.a2,
            "a3": result.coeffs.a3,
            "m_batch": result.coeffs.m_batch,
            "residual": result.residual,
            "r_squared": result.r_squared,
            "n_rows": result.n_rows,
            "rows": result.rows,
        })]
        outputs.append(manifest.finish(outputs).write(out_path.with_name(out_path.stem + ".manifest.json")))
        for path in outputs:
            click.echo(cli_strings.get("written", "Written: {path}").format(path=path), err=True)

        click.echo("", err=True)
        click.echo(format_fit_result(result, fmt_strings))

    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


@cli.command()
@click.option("--grid-h", type=int, default=None, help="Largest H searched exhaustively.")
@click.option("--grid-b", type=int, default=None, help="Bandwidth grid resolution (shares of b_max).")
@click.pass_context
def verify(ctx, grid_h: Optional[int], grid_b: Optional[int]) -> None:
    """
    Compare the solver with exhaustive search on a small scenario (at most 4 devices).

    Examples:
        eefwq --config toy.yaml verify --grid-h 32 --grid-b 20
    """
    try:
        app_config, cli_strings, fmt_strings = _load(ctx)
        scenario = app_config.scenario()
        click.echo(cli_strings.get("verifying", "Comparing solver with exhaustive search..."), err=True)

        h_max = grid_h or app_config.verify.grid_h
        resolution = grid_b or app_config.verify.grid_b
        exhaustive = brute_force(scenario, range(1, h_max + 1), b_resolution=resolution,
                                 settings=app_config.settings)
        try:
            solved = iterate(scenario, settings=app_config.settings)
        except InfeasibleError:
            if exhaustive is not None:
                raise
            solved = None

        click.echo("", err=True)
        click.echo(format_verify_result(solved, exhaustive, fmt_strings))
        if solved is None and exhaustive is None:
            sys.exit(EXIT_INFEASIBLE)

    except InfeasibleError as e:
        _infeasible(e)
    except Exception as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    cli()
