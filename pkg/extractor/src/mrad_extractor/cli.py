"""Command-line entry point: mrad-extract."""

from __future__ import annotations

import sys

import click

from .encoder import DEFAULT_MODEL
from .errors import ExtractorError, ImageError, LayoutError
from .extract import extract


@click.command()
@click.option("--data", "dataset_dir", required=True, help="Dataset root directory.")
@click.option("--layout", required=True, type=click.Choice(["mvtec", "visa", "flat"]),
              help="Directory convention to walk.")
@click.option("--out", "out_path", required=True, help="Output feature pack (.fpk).")
@click.option("--resolution", default=518, show_default=True,
              help="Square input resolution; must tile by the model's patch size.")
@click.option("--model", default=DEFAULT_MODEL, show_default=True,
              help="Vision model checkpoint (hub id or local path).")
@click.option("--split", default="test", show_default=True,
              help="Split subdirectory (mvtec layout only).")
@click.option("--batch", "batch_size", default=8, show_default=True,
              help="Images per encoder batch.")
@click.option("--device", default="cpu", show_default=True)
@click.option("--manifest", "manifest_path", default=None,
              help="Category manifest path (default: manifest.json beside the pack).")
def main(dataset_dir, layout, out_path, resolution, model, split,
         batch_size, device, manifest_path):
    """Encode an image dataset into a feature pack plus category manifest."""
    try:
        summary = extract(
            dataset_dir, layout, out_path,
            resolution=resolution, model=model, split=split,
            batch_size=batch_size, device=device, manifest_path=manifest_path,
        )
    except (LayoutError, ImageError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except ExtractorError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(3)
    click.echo(
        f"wrote {summary.n_images} records "
        f"({summary.n_anomalous} anomalous, {summary.n_masks} with masks, "
        f"{len(summary.categories)} categories) "
        f"grid={summary.grid.grid_h}x{summary.grid.grid_w} d={summary.d} "
        f"-> {summary.out_path}"
    )
    click.echo(f"manifest -> {summary.manifest_path}")


if __name__ == "__main__":
    main()
