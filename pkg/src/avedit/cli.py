"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 numeric failure.
"""

from __future__ import annotations

import functools
import sys

import click

from . import stages
from .checkpoints import MissingArtifactError
from .config import ConfigError, load_config
from .editor import CodecTrainingError, NumericError
from .evalsuite import ProbeTrainingError, UntrustedProbeError

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def stage_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except MissingArtifactError as exc:
            click.echo(f"missing artifact: {exc}", err=True)
            sys.exit(EXIT_MISSING)
        except (NumericError, CodecTrainingError, ProbeTrainingError,
                UntrustedProbeError, FloatingPointError) as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


config_option = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="TOML run configuration; defaults apply when omitted.",
)
force_option = click.option(
    "--force", is_flag=True, default=False,
    help="Compose artifacts even if their config hashes disagree.",
)


@click.group()
def cli():
    """Desk-scale audio-visual sound effect editing pipeline."""


@cli.command("gen-data")
@config_option
@stage_command
def cmd_gen_data(config_path):
    """Generate the pretraining corpus and the edit benchmark."""
    cfg = load_config(config_path)
    out = stages.gen_data(cfg)
    click.echo(
        f"wrote {out['corpus_clips']} corpus clips and "
        f"{out['benchmark_tasks']} benchmark tasks under {cfg.out_dir}"
    )


@cli.command("pretrain-encoder")
@config_option
@force_option
@stage_command
def cmd_pretrain(config_path, force):
    """Pretrain the audio-visual co-encoder; writes loss CSV + figure."""
    cfg = load_config(config_path)
    history = stages.pretrain_encoder(cfg, force=force)
    click.echo(
        f"pretrained {len(history)} steps; final total loss "
        f"{history[-1]['total']:.4f}"
    )


@cli.command("calibrate-gate")
@config_option
@force_option
@stage_command
def cmd_calibrate(config_path, force):
    """Calibrate the correlation-gate threshold on the corpus."""
    cfg = load_config(config_path)
    r = stages.calibrate_gate(cfg, force=force)
    click.echo(f"gate threshold r = {r:.6f}")


@cli.command("train-codec")
@config_option
@force_option
@stage_command
def cmd_train_codec(config_path, force):
    """Train the latent audio codec."""
    cfg = load_config(config_path)
    history = stages.train_codec_stage(cfg, force=force)
    click.echo(f"codec validation MSE {history[-1]:.5f} after {len(history)} epochs")


@cli.command("train-editor")
@config_option
@force_option
@stage_command
def cmd_train_editor(config_path, force):
    """Train the generative editor with flow matching."""
    cfg = load_config(config_path)
    history = stages.train_editor_stage(cfg, force=force)
    click.echo(f"editor final loss {history[-1]:.5f} after {len(history)} steps")


@cli.command("edit")
@config_option
@force_option
@click.option("--steps", type=int, default=None,
              help="Sampling steps (default: the config's editor.sample_steps).")
@click.option("--cfg-scale", type=float, default=None,
              help="Guidance strength (default: the config's editor.cfg_scale).")
@click.option("--seed", type=int, default=None,
              help="Base sampling seed (default: the run's root seed).")
@click.option("--no-text", is_flag=True, default=False,
              help="Drop text conditioning (null text tokens).")
@stage_command
def cmd_edit(config_path, force, steps, cfg_scale, seed, no_text):
    """Run the editor over every benchmark task."""
    cfg = load_config(config_path)
    manifest = stages.edit_stage(cfg, steps=steps, cfg_scale=cfg_scale,
                                 seed=seed, no_text=no_text, force=force)
    click.echo(
        f"edited {len(manifest['tasks'])} tasks ({manifest['variant']})"
    )


@cli.command("evaluate")
@config_option
@force_option
@click.option("--variant", type=click.Choice(["with_text", "no_text"]),
              default="with_text", show_default=True)
@stage_command
def cmd_evaluate(config_path, force, variant):
    """Score edited outputs; writes JSON, markdown table and figures."""
    cfg = load_config(config_path)
    report = stages.evaluate_stage(cfg, variant=variant, force=force)
    click.echo(report.markdown_table())


@cli.command("reproduce-all")
@config_option
@stage_command
def cmd_reproduce(config_path):
    """Run the full pipeline in dependency order."""
    cfg = load_config(config_path)
    summary = stages.reproduce_all(cfg)
    click.echo(
        f"pipeline complete; overall edited FD (with text) "
        f"{summary['metrics_with_text']['fd']:.3f}"
    )


def main() -> None:
    cli(prog_name="avedit")


if __name__ == "__main__":
    main()
