"""Command-line interface: ``dlf encode|decode|train|eval``.

Exit codes: 0 success; 2 unreadable/invalid inputs or config; 3 checkpoint,
compatibility or stage-ordering problems; 4 container parse errors.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import bitstream, codec
from .config import ConfigError, DatasetSpec, load_config

EXIT_INPUT = 2
EXIT_CHECKPOINT = 3
EXIT_PARSE = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_model(checkpoint: str):
    try:
        return codec.load_checkpoint(checkpoint)
    except FileNotFoundError:
        _fail(EXIT_CHECKPOINT, f"checkpoint not found: {checkpoint}")
    except codec.CheckpointMismatchError as exc:
        _fail(EXIT_CHECKPOINT, str(exc))


@click.group()
def main():
    """Dual-branch generative latent codec."""


@main.command()
@click.argument("input_path", type=click.Path())
@click.option("--checkpoint", required=True, help="Model checkpoint (.pt).")
@click.option("--out", required=True, help="Output container path.")
@click.option("--token-keep", type=int, default=None,
              help="Semantic tokens kept per window (no_detail rate control).")
def encode(input_path, checkpoint, out, token_keep):
    """Compress one PNG/PPM image into a container."""
    from .data import atomic_write_bytes, load_image

    try:
        image = load_image(input_path)
    except (OSError, ValueError) as exc:
        _fail(EXIT_INPUT, f"cannot read image {input_path}: {exc}")
    model, manifest = _load_model(checkpoint)
    try:
        blob = codec.compress(model, image, lambda_index=manifest["lambda_index"],
                              token_keep=token_keep)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))
    atomic_write_bytes(out, blob)
    container = bitstream.read_container(blob)
    from .evaluation import compute_bpp

    click.echo(
        f"{out}: {container.num_bytes} bytes total "
        f"(header 22, semantic {len(container.semantic)}, detail {len(container.detail)}), "
        f"{compute_bpp(container):.6f} bpp"
    )


@main.command()
@click.argument("input_path", type=click.Path())
@click.option("--checkpoint", required=True, help="Model checkpoint (.pt).")
@click.option("--out", required=True, help="Output image path (PNG/PPM).")
def decode(input_path, checkpoint, out):
    """Decompress a container back to an image."""
    from .data import save_image

    try:
        blob = Path(input_path).read_bytes()
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot read container {input_path}: {exc}")
    model, manifest = _load_model(checkpoint)
    try:
        result = codec.decompress(model, blob, expected_lambda=manifest["lambda_index"])
    except (bitstream.FormatError, bitstream.VersionError) as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    except codec.CheckpointMismatchError as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    except bitstream.BitstreamError as exc:
        _fail(EXIT_PARSE, str(exc))
    save_image(result.image, out)
    h, w = result.image.shape[-2:]
    click.echo(f"{out}: decoded {w}x{h}")


@main.command()
@click.option("--config", "config_path", required=True, help="key=value config file.")
@click.option("--out", default=None, help="Override the config's out_dir.")
@click.option("--seed", type=int, default=None, help="Override the config's seed.")
def train(config_path, out, seed):
    """Run one training stage from a config file (resumable)."""
    from .config import dump_effective_config
    from .training import StageOrderError
    from .training import train as run_train

    try:
        train_cfg, model_cfg, data = load_config(config_path)
    except (OSError, ConfigError) as exc:
        _fail(EXIT_INPUT, str(exc))
    if out is not None:
        train_cfg.out_dir = out
    if seed is not None:
        train_cfg.seed = seed
    click.echo("# effective configuration")
    click.echo(dump_effective_config(train_cfg, model_cfg, data), nl=False)
    try:
        result = run_train(train_cfg, model_cfg=model_cfg, data=data)
    except StageOrderError as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    except (ConfigError, ValueError) as exc:
        _fail(EXIT_INPUT, str(exc))
    click.echo(f"checkpoint: {result.checkpoint}")
    click.echo(f"trace: {result.trace}")


@main.command(name="eval")
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              help="Checkpoint path; repeat for multiple rate points.")
@click.option("--data", "data_root", required=True,
              help="Image directory or synthetic:<count>[:<size>].")
@click.option("--variant", default="full", help="Model variant to evaluate.")
@click.option("--out", required=True, help="Output directory for reports.")
@click.option("--anchor-csv", default=None, help="Anchor RD curve CSV for BD-rate.")
@click.option("--seed", type=int, default=0)
@click.option("--crop", type=int, default=256, help="Eval crop size (multiple of 16).")
@click.option("--max-images", type=int, default=None)
@click.option("--workers", type=int, default=1)
def eval_cmd(checkpoints, data_root, variant, out, anchor_csv, seed, crop,
             max_images, workers):
    """Rate-distortion evaluation through the real bitstream."""
    from .evaluation import run_eval

    try:
        spec = DatasetSpec(root=data_root, crop_size=crop, seed=seed,
                           max_images=max_images, split=(0.0, 0.0, 1.0))
    except ConfigError as exc:
        _fail(EXIT_INPUT, str(exc))
    try:
        curve = run_eval(list(checkpoints), spec, variant, out,
                         anchor_csv=anchor_csv, workers=workers)
    except codec.CheckpointMismatchError as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    except FileNotFoundError as exc:
        _fail(EXIT_CHECKPOINT, str(exc))
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))
    for p in curve.points:
        click.echo(
            f"bpp {p.bpp:.6f}  psnr {p.metrics['psnr_db']:.2f} dB  "
            f"ms-ssim {p.metrics['ms_ssim']:.4f}  latent-mse {p.metrics['latent_mse']:.5f}"
        )
    click.echo(f"report: {Path(out) / 'report.md'}")


if __name__ == "__main__":
    main()
