#!/usr/bin/env python3
"""
Main DL-HIM Workbench Script
Generate datasets, train correction operators, solve, and run benchmark scenarios

Usage:
    python main.py gen --config config.yaml
    python main.py train --config config.yaml --seed 7
    python main.py solve --config config.yaml --checkpoint results/operator.ckpt
    python main.py bench update-strategies --threads 4
    python main.py describe results/operator.ckpt

Exit codes: 0 success, 1 failed benchmark verdict, 2 error.
"""

import logging
import os
import sys

import click
from colorama import Fore, Style, init as colorama_init

from dlhim.commands import cmd_bench, cmd_describe, cmd_gen, cmd_solve, cmd_train
from dlhim.errors import DlhimError
from dlhim.experiment import load_config
from dlhim.reports import format_banner

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "scenarios")

LEVEL_COLORS = {
    logging.DEBUG: Fore.CYAN,
    logging.INFO: Fore.GREEN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
}


class ColorFormatter(logging.Formatter):
    def format(self, record):
        color = LEVEL_COLORS.get(record.levelno, "")
        record.levelname = f"{color}{record.levelname}{Style.RESET_ALL}"
        return super().format(record)


def setup_logging(verbose: bool):
    colorama_init()
    handler = logging.StreamHandler()
    handler.setFormatter(ColorFormatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _fail(e: Exception):
    click.echo(f"{Fore.RED}error:{Style.RESET_ALL} {e}", err=True)
    sys.exit(2)


def _echo_summary(title: str, summary: dict):
    click.echo(format_banner(title, [f"{k}: {v}" for k, v in summary.items()]))


def config_options(f):
    f = click.option("--threads", type=int, default=None, help="Worker threads (overrides config and .env)")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory")(f)
    f = click.option("--seed", type=int, default=None, help="Master seed")(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default="config.yaml",
                     show_default=True, help="Experiment YAML")(f)
    return f


@click.group()
@click.option("--verbose", is_flag=True, help="Debug logging")
def cli(verbose):
    """DL-HIM workbench."""
    setup_logging(verbose)


@cli.command()
@config_options
def gen(config_path, seed, out, threads):
    """Generate train and test instance datasets."""
    try:
        cfg = load_config(config_path, seed, out, threads)
        _echo_summary("DATASETS WRITTEN", cmd_gen(cfg))
    except DlhimError as e:
        _fail(e)


@cli.command()
@config_options
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None,
              help="Dataset directory (default: <out>/data/train)")
def train(config_path, seed, out, threads, data_dir):
    """Train the configured correction operator."""
    try:
        cfg = load_config(config_path, seed, out, threads)
        summary = cmd_train(cfg, data_dir)
        click.echo(f"final loss {summary['final_loss']:.6e}  wall {summary['wall_seconds']:.2f}s  "
                   f"peak tape {summary['peak_tape_bytes']} bytes")
        _echo_summary("TRAINING COMPLETE", summary)
    except DlhimError as e:
        _fail(e)


@cli.command()
@config_options
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="Operator checkpoint")
@click.option("--instance", type=int, default=0, show_default=True, help="Instance index")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None, help="Dataset directory")
@click.option("--grid", type=int, default=None, help="Interior grid size (default: first test grid)")
def solve(config_path, seed, out, threads, checkpoint, instance, data_dir, grid):
    """Solve one instance with every configured update strategy."""
    try:
        cfg = load_config(config_path, seed, out, threads)
        comparison = cmd_solve(cfg, checkpoint, instance, data_dir, grid)
        lines = [f"{row.label:<20} {row.verdict:<11} cycles {row.cycles:>5}  "
                 f"rel. residual {row.final_relative_residual:.3e}" for row in comparison.itertuples()]
        click.echo(format_banner("SOLVE COMPARISON", lines))
    except DlhimError as e:
        _fail(e)


@cli.command()
@click.argument("scenario", required=False)
@config_options
def bench(scenario, config_path, seed, out, threads):
    """Run a benchmark scenario (false-fixed-point, loss-matrix, cost-table, update-strategies)."""
    try:
        if scenario and config_path == "config.yaml":
            config_path = os.path.join(SCENARIO_DIR, scenario.replace("-", "_") + ".yaml")
        cfg = load_config(config_path, seed, out, threads)
        result = cmd_bench(cfg, scenario)
    except DlhimError as e:
        _fail(e)
        return
    click.echo(result.report())
    sys.exit(0 if result.passed else 1)


@cli.command()
@click.argument("checkpoint", type=click.Path(dir_okay=False))
def describe(checkpoint):
    """Print a checkpoint's architecture and parameter count."""
    try:
        _echo_summary("OPERATOR", cmd_describe(checkpoint))
    except DlhimError as e:
        _fail(e)


if __name__ == "__main__":
    cli()
