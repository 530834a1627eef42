"""Command-line interface.

Subcommands wire the feature-pack, bank, and weight file formats to the
library: build-memory, score, train, eval, stats, subsample. Exit codes:
0 success, 2 I/O or file-format failure, 3 validation failure, 4
numerical failure. All JSON documents carry ``schema_version``. Given
identical inputs (and seeds), every command writes byte-identical
outputs, so reruns are safe.
"""

from __future__ import annotations

import functools
import json
import re
import sys
from pathlib import Path

import click
import numpy as np

from . import finetune, membank, metrics, packio, retrieval, scoring
from .types import (
    SCHEMA_VERSION,
    MetricWeights,
    MradError,
    NumericalError,
    PackFormatError,
    RetrievalParams,
    TrainConfig,
    ValidationError,
)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def _jsonl_bytes(rows) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode()


def handles_errors(fn):
    """Translate library errors into the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (PackFormatError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        except ValidationError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)
        except NumericalError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(4)
        except MradError as e:  # safety net for future error classes
            click.echo(f"error: {e}", err=True)
            sys.exit(3)

    return wrapper


@click.group()
def main():
    """Memory-retrieval anomaly detection over extracted feature packs."""


@main.command("build-memory")
@click.option("--features", "features_path", required=True, help="Input feature pack (.fpk).")
@click.option("--out", "out_path", required=True, help="Output memory bank (.mrb).")
@click.option("--log", "log_path", default=None, help="Optional JSON build summary.")
@handles_errors
def cmd_build_memory(features_path, out_path, log_path):
    """Build the two-level memory bank from an auxiliary feature pack."""
    records, grid, d = packio.read_feature_pack(features_path)
    if not records:
        raise ValidationError(f"empty pack: {features_path}")
    bank = membank.build_bank(records, grid, source_tag=Path(features_path).name)
    packio.save_bank(bank, out_path)
    if log_path:
        summary = {
            "schema_version": SCHEMA_VERSION,
            "N_c": bank.N_c,
            "N_p": bank.N_p,
            "records": len(records),
            "anomalous_records": int(sum(r.label for r in records)),
            "d": d,
        }
        packio.atomic_write_bytes(log_path, _json_bytes(summary))
    click.echo(f"N_c={bank.N_c} N_p={bank.N_p}")


def _safe_stem(record_id: str, index: int) -> str:
    stem = re.sub(r"[^A-Za-z0-9._-]", "_", record_id)[:80]
    return f"{index:05d}_{stem}"


@main.command("score")
@click.option("--bank", "bank_path", required=True, help="Memory bank (.mrb).")
@click.option("--features", "features_path", required=True, help="Query feature pack (.fpk).")
@click.option("--out", "out_dir", required=True, help="Output directory for maps and scores.jsonl.")
@click.option("--weights", "weights_path", default=None, help="Metric weights (.mrw); omit for the train-free model.")
@click.option("--tau", default=1.0, show_default=True, help="Softmax temperature.")
@click.option("--topk", default=0.01, show_default=True, help="Top-k pooling fraction of pixels.")
@click.option("--smooth-sigma", default=0.0, show_default=True, help="Gaussian smoothing sigma for pixel maps (0 = off).")
@click.option("--pixel-only", is_flag=True, help="Image score from the pixel map alone (drop the image-level term).")
@click.option("--render-png", is_flag=True, help="Also write colormapped heatmap PNGs (requires matplotlib).")
@handles_errors
def cmd_score(bank_path, features_path, out_dir, weights_path, tau, topk,
              smooth_sigma, pixel_only, render_png):
    """Score a query pack: per-image anomaly maps (.amap) plus scores.jsonl."""
    imsave = None
    if render_png:
        try:
            from matplotlib.image import imsave
        except ImportError:
            raise ValidationError(
                "--render-png requires matplotlib (install the 'render' extra)"
            )
    bank = packio.load_bank(bank_path)
    weights = packio.load_weights(weights_path) if weights_path else None
    records, grid, d = packio.read_feature_pack(features_path)
    if d != bank.d:
        raise ValidationError(f"pack dim {d} != bank dim {bank.d}")
    params = RetrievalParams(tau=tau, topk_fraction=topk)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, rec in enumerate(records):
        if weights is not None:
            result = retrieval.retrieve_ft(rec, bank, weights, params, training=False)
        else:
            result = retrieval.retrieve_tf(rec, bank, params)
        grid_scores = result.y_seg[:, 1].reshape(grid.grid_h, grid.grid_w)
        amap = scoring.upsample_map(grid_scores, (grid.image_h, grid.image_w))
        if smooth_sigma > 0:
            amap = scoring.smooth_map(amap, smooth_sigma)
        if pixel_only:
            score = scoring.image_score_pixel_only(amap, params)
        else:
            score = scoring.image_score(result.y_cls, amap, params)
        stem = _safe_stem(rec.id, i)
        packio.write_anomaly_map(amap, out / f"{stem}.amap")
        if render_png:
            imsave(out / f"{stem}.png", amap, cmap="jet", vmin=0.0, vmax=1.0)
        rows.append(
            {
                "schema_version": SCHEMA_VERSION,
                "id": rec.id,
                "label": rec.label,
                "score": score,
                "y_cls_anom": float(result.y_cls[1]),
                "map": f"{stem}.amap",
            }
        )
    packio.atomic_write_bytes(out / "scores.jsonl", _jsonl_bytes(rows))
    click.echo(f"scored {len(rows)} images -> {out}")


@main.command("train")
@click.option("--bank", "bank_path", required=True, help="Memory bank (.mrb).")
@click.option("--features", "features_path", required=True, help="Auxiliary training pack (.fpk).")
@click.option("--out", "out_path", required=True, help="Output metric weights (.mrw).")
@click.option("--lr", default=5e-4, show_default=True, help="Adam learning rate.")
@click.option("--batch", default=8, show_default=True, help="Batch size.")
@click.option("--epochs", default=1, show_default=True, help="Training epochs (0 writes identity).")
@click.option("--rho-seg", default=0.20, show_default=True, help="Similarity-dropout fraction, segmentation head.")
@click.option("--rho-cls", default=0.05, show_default=True, help="Similarity-dropout fraction, classification head.")
@click.option("--seed", default=0, show_default=True, help="Shuffle seed.")
@handles_errors
def cmd_train(bank_path, features_path, out_path, lr, batch, epochs, rho_seg, rho_cls, seed):
    """Fine-tune metric weights on an auxiliary pack; writes .mrw plus a
    step log at <out>.log.jsonl."""
    bank = packio.load_bank(bank_path)
    records, grid, d = packio.read_feature_pack(features_path)
    if d != bank.d:
        raise ValidationError(f"pack dim {d} != bank dim {bank.d}")
    config = TrainConfig(learning_rate=lr, batch_size=batch, epochs=epochs, seed=seed)
    params = RetrievalParams(rho_seg=rho_seg, rho_cls=rho_cls)
    log_rows = []

    def log_fn(entry):
        log_rows.append({"schema_version": SCHEMA_VERSION, **entry})

    weights = finetune.train(records, grid, bank, config, params, log_fn=log_fn)
    packio.save_weights(weights, out_path)
    packio.atomic_write_bytes(f"{out_path}.log.jsonl", _jsonl_bytes(log_rows))
    click.echo(f"trained {len(log_rows)} steps -> {out_path}")


@main.command("eval")
@click.option("--scores", "scores_dir", required=True, help="Directory produced by `score`.")
@click.option("--features", "features_path", required=True, help="Query pack with ground truth (.fpk).")
@click.option("--out", "out_path", required=True, help="Output report JSON.")
@click.option("--categories", "manifest_path", default=None, help="JSON manifest mapping image id to category.")
@click.option("--csv", "csv_path", default=None, help="Optional CSV rendering of the report.")
@handles_errors
def cmd_eval(scores_dir, features_path, out_path, manifest_path, csv_path):
    """Join score outputs with pack ground truth and compute the metric report."""
    scores_dir = Path(scores_dir)
    jsonl = scores_dir / "scores.jsonl"
    rows = [json.loads(line) for line in jsonl.read_text().splitlines() if line.strip()]
    records, grid, d = packio.read_feature_pack(features_path)
    by_id = {r.id: r for r in records}

    score_ids = [row["id"] for row in rows]
    if len(set(score_ids)) != len(score_ids):
        dupes = sorted({i for i in score_ids if score_ids.count(i) > 1})
        raise ValidationError(f"duplicate ids in scores.jsonl: {dupes}")
    missing = sorted(set(score_ids) - set(by_id))
    extra = sorted(set(by_id) - set(score_ids))
    if missing or extra:
        raise ValidationError(
            f"id mismatch between scores and pack: scored-but-not-in-pack={missing}, "
            f"in-pack-but-unscored={extra}"
        )

    categories: dict[str, str] = {}
    if manifest_path:
        manifest = json.loads(Path(manifest_path).read_text())
        if not isinstance(manifest, dict):
            raise ValidationError("category manifest must be a JSON object of id -> category")
        unknown = sorted(set(manifest) - set(by_id))
        if unknown:
            raise ValidationError(f"manifest ids not present in pack: {unknown}")
        absent = sorted(set(by_id) - set(manifest))
        if absent:
            raise ValidationError(f"pack ids missing from manifest: {absent}")
        categories = {str(k): str(v) for k, v in manifest.items()}

    grouped: dict[str, dict[str, list]] = {}
    for row in sorted(rows, key=lambda r: r["id"]):
        rec = by_id[row["id"]]
        amap = packio.read_anomaly_map(scores_dir / row["map"])
        if rec.label == 1 and rec.mask is None:
            click.echo(
                f"warning: {rec.id} is anomalous but has no mask; "
                "excluded from pixel metrics",
                err=True,
            )
        cat = categories.get(rec.id, "all")
        g = grouped.setdefault(cat, {"scores": [], "labels": [], "maps": [], "masks": []})
        g["scores"].append(float(row["score"]))
        g["labels"].append(rec.label)
        g["maps"].append(amap)
        g["masks"].append(rec.mask)

    per_cat = {
        cat: metrics.category_metrics(g["scores"], g["labels"], g["maps"], g["masks"])
        for cat, g in grouped.items()
    }
    report = metrics.build_report(per_cat, metadata={"pro_fpr_cap": metrics.PRO_FPR_CAP})
    packio.atomic_write_bytes(out_path, _json_bytes(report.to_dict()))
    if csv_path:
        packio.atomic_write_bytes(csv_path, report.to_csv().encode())
    for name in sorted(report.averages):
        click.echo(f"{name}={report.averages[name]:.4f}")


@main.command("stats")
@click.option("--bank", "bank_path", required=True, help="Memory bank (.mrb).")
@click.option("--features", "features_path", required=True, help="Query pack (.fpk).")
@click.option("--weights", "weights_path", default=None, help="Metric weights (.mrw) for the fine-tuned model.")
@click.option("--out", "out_path", required=True, help="Output statistics JSON.")
@handles_errors
def cmd_stats(bank_path, features_path, weights_path, out_path):
    """Mean retrieval similarities split by query patch ground truth."""
    bank = packio.load_bank(bank_path)
    weights = packio.load_weights(weights_path) if weights_path else None
    records, grid, d = packio.read_feature_pack(features_path)
    if d != bank.d:
        raise ValidationError(f"pack dim {d} != bank dim {bank.d}")
    stats = retrieval.dataset_statistics(records, grid, bank, RetrievalParams(), weights)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "mode": "ft" if weights is not None else "tf",
        **stats.to_dict(),
    }
    packio.atomic_write_bytes(out_path, _json_bytes(doc))
    click.echo(json.dumps(doc, sort_keys=True))


@main.command("subsample")
@click.option("--bank", "bank_path", required=True, help="Input memory bank (.mrb).")
@click.option("--n", "n", required=True, type=int, help="Number of patch-level entries to keep.")
@click.option("--seed", default=0, show_default=True, help="Sampling seed.")
@click.option("--out", "out_path", required=True, help="Output memory bank (.mrb).")
@handles_errors
def cmd_subsample(bank_path, n, seed, out_path):
    """Randomly subsample the patch-level memory (image level unchanged)."""
    bank = packio.load_bank(bank_path)
    sub = membank.subsample_bank(bank, n, seed)
    packio.save_bank(sub, out_path)
    click.echo(f"N_c={sub.N_c} N_p={sub.N_p}")


if __name__ == "__main__":
    main()
