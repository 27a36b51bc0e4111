"""
    roomdistill.cli
    ~~~~~~~~~~~~~~~

    The ``roomdistill`` command: ``generate``, ``render`` and ``eval``.

    Exit codes: 0 success, 2 invalid configuration or no oracle to evaluate
    against, 3 aborted stage, 4 corrupt checkpoint, 5 output directory in use.

    :license: BSD, see LICENSE for more details.
"""

import logging
import os
import sys

import click
import torch

from roomdistill import __version__
from roomdistill.config import PipelineConfig
from roomdistill.exceptions import AbortedStage
from roomdistill.exceptions import CheckpointCorrupt
from roomdistill.exceptions import ConfigInvalid
from roomdistill.exceptions import DirectoryLocked
from roomdistill.exceptions import OracleUnavailable
from roomdistill.pipeline import Pipeline
from roomdistill.pipeline import write_report

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_CORRUPT = 4
EXIT_LOCKED = 5
THREADS_ENV = "ROOMDISTILL_NUM_THREADS"


def _fail(code: int, message: str) -> None:
    click.echo(f"Error: {message}", err=True)
    sys.exit(code)


def _run(action):
    try:
        return action()
    except ConfigInvalid as e:
        _fail(EXIT_CONFIG, str(e))
    except OracleUnavailable as e:
        _fail(EXIT_CONFIG, str(e))
    except AbortedStage as e:
        logger.error("%s", e)
        _fail(EXIT_ABORTED, str(e))
    except CheckpointCorrupt as e:
        _fail(EXIT_CORRUPT, f"corrupt checkpoint: {e}")
    except DirectoryLocked as e:
        _fail(EXIT_LOCKED, str(e))


def _set_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        threads = int(value)
    except ValueError:
        raise click.BadParameter(
            f"{THREADS_ENV} must be an integer, got {value!r}"
        ) from None
    if threads < 1:
        raise click.BadParameter(f"{THREADS_ENV} must be positive, got {threads}")
    torch.set_num_threads(threads)


@click.group()
@click.version_option(__version__, prog_name="roomdistill")
@click.option("-v", "--verbose", count=True, help="More logging; repeat for debug.")
def cli(verbose: int) -> None:
    """Progressive-view score distillation of room-scale radiance fields."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    _set_threads()


@cli.command()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="Config file of key=value lines.",
)
@click.option("--seed", type=int, help="Override the config seed.")
@click.option(
    "--stages", type=click.Choice(["1", "12", "123"]), help="Stages to run."
)
@click.option(
    "--skip-stage",
    "skip_stage",
    type=click.Choice(["2", "3"]),
    multiple=True,
    help="Leave a stage out (ablation).",
)
@click.option(
    "--no-pose-transform",
    is_flag=True,
    help="Give the prior the real rotation and view at the origin in stage 2.",
)
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False),
    help="Continue from a checkpoint; its config is used.",
)
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), help="Output directory."
)
def generate(config_path, seed, stages, skip_stage, no_pose_transform, resume, out_dir):
    """Train a field through the configured stages."""

    def action():
        if resume:
            given = [
                flag
                for flag, value in (
                    ("--config", config_path),
                    ("--seed", seed is not None),
                    ("--stages", stages),
                    ("--skip-stage", skip_stage),
                    ("--no-pose-transform", no_pose_transform),
                )
                if value
            ]
            if given:
                raise click.UsageError(
                    f"{', '.join(given)} cannot be combined with --resume, "
                    f"the checkpoint's config is used"
                )
            pipeline = Pipeline.from_checkpoint(resume, out_dir)
        else:
            if not config_path:
                raise click.UsageError("--config is required unless --resume is given")
            config = PipelineConfig.from_file(config_path)
            overrides = {}
            if seed is not None:
                overrides["seed"] = seed
            order = stages or "".join(str(s) for s in config.run.stages)
            for skipped in skip_stage:
                order = order.replace(skipped, "")
            overrides["run.stages"] = order
            if no_pose_transform:
                overrides["run.pose_transform"] = False
            pipeline = Pipeline(config.replace(overrides), out_dir)
        result = pipeline.generate()
        click.echo(result.final_checkpoint)

    _run(action)


@cli.command("render")
@click.option(
    "--checkpoint",
    "checkpoint_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option(
    "--pose",
    "pose_spec",
    required=True,
    help="turntable:n_frames=N,radius=R,pitch=P or "
    "pose:yaw=..,pitch=..,x=..,y=..,z=..,fov=..",
)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def render_command(checkpoint_path, pose_spec, out_dir):
    """Render color PNGs and depth PFMs from a checkpoint."""

    def action():
        pipeline = Pipeline.from_checkpoint(checkpoint_path, out_dir)
        try:
            written = pipeline.render_views(pose_spec, out_dir)
        except ValueError as e:
            raise click.BadParameter(str(e), param_hint="--pose") from None
        for path in written:
            click.echo(path)

    _run(action)


@cli.command("eval")
@click.option(
    "--checkpoint",
    "checkpoint_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("--out", "report_path", required=True, type=click.Path(dir_okay=False))
def eval_command(checkpoint_path, report_path):
    """Measure a checkpoint against the oracle room and write a JSON report."""

    def action():
        pipeline = Pipeline.from_checkpoint(checkpoint_path)
        write_report(pipeline.evaluate(), report_path)
        click.echo(report_path)

    _run(action)


def main() -> None:
    cli()
