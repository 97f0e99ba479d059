"""
Command line for viscompm.

    python cli.py simulate --config scene.json --out runs/a
    python cli.py calibrate --config scene.json --ref runs/reference
    python cli.py fill shell.csv filled.csv --resolution 32 32 32
    python cli.py slice runs/a --row 64 --output slice.pgm
    python cli.py inspect runs/a
    python cli.py serve

The same group is available as `flask --app app viscompm ...`.
"""

import logging
import sys

import click

from run_service import inspect_run, run_calibrate, run_fill, run_simulate, run_slice

LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def _report(result) -> None:
    success, message = result
    click.echo(message, err=not success)
    if not success:
        sys.exit(1)


@click.group()
@click.option("--verbose", is_flag=True, help="Log per-substep detail.")
def viscompm(verbose):
    """Viscoelastic MPM simulation and parameter calibration."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@viscompm.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="JSON run config.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), help="Override output_dir.")
@click.option("--seed", type=int, help="Override the fill seed.")
@click.option("--frames", type=click.IntRange(min=0), help="Override the frame count.")
@click.option("--deterministic/--no-deterministic", default=True, show_default=True,
              help="Fixed-order grid accumulation.")
def simulate(config_path, output_dir, seed, frames, deterministic):
    """Run a simulation and write frame dumps, diagnostics and a manifest."""
    _report(run_simulate(config_path, output_dir, seed, frames, deterministic))


@viscompm.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="JSON run config.")
@click.option("--ref", "ref_dir", required=True, type=click.Path(file_okay=False), help="Reference frame dumps.")
@click.option("--out", "output_dir", type=click.Path(file_okay=False), help="Override output_dir.")
@click.option("--budget", type=click.IntRange(min=0), help="Override the evaluation budget.")
def calibrate(config_path, ref_dir, output_dir, budget):
    """Fit material parameters to reference frames."""
    _report(run_calibrate(config_path, ref_dir, output_dir, budget))


@viscompm.command()
@click.argument("input_path", type=click.Path(dir_okay=False))
@click.argument("output_path", type=click.Path(dir_okay=False))
@click.option("--resolution", nargs=3, type=int, default=(32, 32, 32), show_default=True)
@click.option("--per-voxel", "seed_per_voxel", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def fill(input_path, output_path, resolution, seed_per_voxel, seed):
    """Seed particles inside a closed shell (CSV or PLY in, CSV out)."""
    _report(run_fill(input_path, output_path, tuple(resolution), seed_per_voxel, seed))


@viscompm.command("slice")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--row", required=True, type=int, help="Image row sampled in every frame.")
@click.option("--output", "output_path", required=True, type=click.Path(dir_okay=False))
def slice_command(run_dir, row, output_path):
    """Write a space-time slice (time down, space across) of a finished run."""
    _report(run_slice(run_dir, row, output_path))


@viscompm.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
def inspect(run_dir):
    """Print a run's manifest and diagnostics summary."""
    _report(inspect_run(run_dir))


@viscompm.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=5000, show_default=True)
def serve(host, port):
    """Serve the read-only results API."""
    from app import create_app
    create_app().run(host=host, port=port)


if __name__ == '__main__':
    viscompm()
