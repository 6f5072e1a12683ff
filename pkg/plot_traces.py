#!/usr/bin/env python3
"""
Plot Traces
Regenerate convergence figures from trace CSVs written by `main.py solve` / `main.py bench`

Usage:
    python plot_traces.py results/solve/trace_*.csv -o strategies.png
    python plot_traces.py results/bench/false_fixed_point/traces/fixed_step/seed0_inst000.csv --update
"""

import os

import click
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def _label(path: str) -> str:
    name = os.path.splitext(os.path.basename(path))[0]
    return name[len("trace_"):] if name.startswith("trace_") else name


@click.command()
@click.argument("traces", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", default="traces.png", show_default=True, help="Output image")
@click.option("--update", is_flag=True, help="Also plot the update norm ||G(u) - u|| (dashed)")
@click.option("--error", is_flag=True, help="Plot err_norm instead of res_norm")
def main(traces, output, update, error):
    """Semilog residual (or error) history per trace."""
    column = "err_norm" if error else "res_norm"
    fig, ax = plt.subplots(figsize=(7, 4.5))

    for path in traces:
        frame = pd.read_csv(path)
        line, = ax.semilogy(frame["cycle"], frame[column], label=f"{_label(path)} {column}")
        if update:
            ax.semilogy(frame["cycle"], frame["upd_norm"], linestyle="--", color=line.get_color(),
                        label=f"{_label(path)} upd_norm")

    ax.set_xlabel("cycle")
    ax.set_ylabel("norm")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(output, dpi=150)
    click.echo(f"Saved {output}")


if __name__ == "__main__":
    main()
