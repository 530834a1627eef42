"""End-to-end extraction: dataset directory -> feature pack + manifest.

The pack is written with the engine's own serializer so it always
satisfies the engine's read-side validation; the sidecar manifest maps
image id to category in exactly the shape ``mrad eval --categories``
consumes (a bare JSON object, no envelope).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from mrad import ImageRecord, PatchGrid, write_feature_pack

from .datasets import discover, load_mask, open_image
from .encoder import DEFAULT_MODEL, DualBranchEncoder, preprocess_image


@dataclass(frozen=True)
class ExtractSummary:
    n_images: int
    n_anomalous: int
    n_masks: int
    categories: tuple[str, ...]
    grid: PatchGrid
    d: int
    out_path: Path
    manifest_path: Path


def extract(
    dataset_dir,
    layout: str,
    out_path,
    *,
    resolution: int = 518,
    model: str = DEFAULT_MODEL,
    split: str = "test",
    batch_size: int = 8,
    device: str = "cpu",
    manifest_path=None,
) -> ExtractSummary:
    """Encode every image under ``dataset_dir`` and write one pack.

    Images are processed in deterministic (sorted) order, batched
    through the encoder, and written sequentially; rerunning on the
    same inputs produces byte-identical outputs.
    """
    entries = discover(dataset_dir, layout, split=split)
    encoder = DualBranchEncoder(model, device=device)
    g = encoder.grid_size(resolution)
    grid = PatchGrid(grid_h=g, grid_w=g, image_h=resolution, image_w=resolution)

    records = []
    n_masks = 0
    for start in range(0, len(entries), max(1, batch_size)):
        batch = entries[start : start + max(1, batch_size)]
        pixels = []
        masks = []
        for entry in batch:
            image = open_image(entry.image_path)
            pixels.append(preprocess_image(image, resolution))
            if entry.mask_path is not None:
                masks.append(load_mask(entry.mask_path, image.size, resolution))
                n_masks += 1
            else:
                masks.append(None)
        cls, patches = encoder.encode(np.stack(pixels))
        for i, entry in enumerate(batch):
            records.append(ImageRecord(
                id=entry.id,
                label=entry.label,
                cls_feature=cls[i],
                patch_features=patches[i],
                mask=masks[i],
            ))

    out_path = Path(out_path)
    write_feature_pack(records, grid, encoder.d, out_path)

    if manifest_path is None:
        manifest_path = out_path.parent / "manifest.json"
    manifest_path = Path(manifest_path)
    manifest = {entry.id: entry.category for entry in entries}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    return ExtractSummary(
        n_images=len(entries),
        n_anomalous=sum(e.label for e in entries),
        n_masks=n_masks,
        categories=tuple(sorted({e.category for e in entries})),
        grid=grid,
        d=encoder.d,
        out_path=out_path,
        manifest_path=manifest_path,
    )
