"""Dataset directory walkers and image/mask loading.

Three layouts are recognized:

mvtec   <root>/<category>/<split>/<defect_type>/<image>
        <root>/<category>/ground_truth/<defect_type>/<image stem>_mask.png
        (``root`` may also point directly at one category directory;
        defect type "good" means normal)

visa    <root>/<category>/Data/Images/{Normal,Anomaly}/<image>
        <root>/<category>/Data/Masks/Anomaly/<image stem>.png

flat    <root>/normal/<image>
        <root>/anomalous/<image>
        <root>/masks/<image stem>.png

Masks are optional everywhere; anomalous images without one are still
extracted (the engine excludes them from pixel-level metrics).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageError, LayoutError

_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


@dataclass(frozen=True)
class ImageEntry:
    """One dataset image: identity, category, label, and file locations."""

    id: str
    category: str
    label: int
    image_path: Path
    mask_path: Path | None


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in _IMAGE_EXTS
    )


def _find_mask(directory: Path, stem: str) -> Path | None:
    # MVTec appends _mask to the image stem; other sets reuse the stem.
    if not directory.is_dir():
        return None
    for candidate_stem in (f"{stem}_mask", stem):
        for ext in _IMAGE_EXTS:
            p = directory / f"{candidate_stem}{ext}"
            if p.is_file():
                return p
    return None


def walk_mvtec(root: Path, split: str = "test") -> list[ImageEntry]:
    root = Path(root)
    if (root / split).is_dir():
        categories = [root]
    else:
        categories = sorted(
            d for d in root.iterdir() if d.is_dir() and (d / split).is_dir()
        )
    if not categories:
        raise LayoutError(f"{root}: no category directories with a {split!r} split")
    entries = []
    for cat in categories:
        for defect_dir in sorted((cat / split).iterdir()):
            if not defect_dir.is_dir():
                continue
            label = 0 if defect_dir.name == "good" else 1
            gt_dir = cat / "ground_truth" / defect_dir.name
            for img in _images_in(defect_dir):
                mask = _find_mask(gt_dir, img.stem) if label else None
                entries.append(ImageEntry(
                    id=f"{cat.name}/{split}/{defect_dir.name}/{img.stem}",
                    category=cat.name,
                    label=label,
                    image_path=img,
                    mask_path=mask,
                ))
    return entries


def walk_visa(root: Path) -> list[ImageEntry]:
    root = Path(root)
    if (root / "Data" / "Images").is_dir():
        categories = [root]
    else:
        categories = sorted(
            d for d in root.iterdir()
            if d.is_dir() and (d / "Data" / "Images").is_dir()
        )
    if not categories:
        raise LayoutError(f"{root}: no category directories with Data/Images")
    entries = []
    for cat in categories:
        for side, label in (("Normal", 0), ("Anomaly", 1)):
            for img in _images_in(cat / "Data" / "Images" / side):
                mask = None
                if label:
                    mask = _find_mask(cat / "Data" / "Masks" / "Anomaly", img.stem)
                entries.append(ImageEntry(
                    id=f"{cat.name}/{side}/{img.stem}",
                    category=cat.name,
                    label=label,
                    image_path=img,
                    mask_path=mask,
                ))
    return entries


def walk_flat(root: Path) -> list[ImageEntry]:
    root = Path(root)
    normal_dir = root / "normal"
    anomalous_dir = root / "anomalous"
    if not (normal_dir.is_dir() or anomalous_dir.is_dir()):
        raise LayoutError(f"{root}: flat layout needs normal/ or anomalous/")
    category = root.resolve().name
    entries = []
    for img in _images_in(normal_dir):
        entries.append(ImageEntry(
            id=f"normal/{img.stem}", category=category, label=0,
            image_path=img, mask_path=None,
        ))
    for img in _images_in(anomalous_dir):
        entries.append(ImageEntry(
            id=f"anomalous/{img.stem}", category=category, label=1,
            image_path=img, mask_path=_find_mask(root / "masks", img.stem),
        ))
    return entries


def discover(root, layout: str, split: str = "test") -> list[ImageEntry]:
    """Walk ``root`` according to ``layout``; error if nothing is found."""
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset directory not found: {root}")
    if layout == "mvtec":
        entries = walk_mvtec(root, split=split)
    elif layout == "visa":
        entries = walk_visa(root)
    elif layout == "flat":
        entries = walk_flat(root)
    else:
        raise LayoutError(f"unknown layout {layout!r} (expected mvtec, visa, or flat)")
    if not entries:
        raise LayoutError(f"{root}: no images found for layout {layout!r}")
    return entries


def open_image(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except OSError as e:
        raise ImageError(f"unreadable image {path}: {e}") from e
    return img


def load_mask(path: Path, image_size: tuple[int, int], resolution: int) -> np.ndarray:
    """Load a ground-truth mask as uint8 {0,1} at resolution**2.

    The mask must match its image's original size. Binarize (>0) first,
    then nearest-neighbor resize, so values stay exactly binary.
    """
    mask_img = open_image(path)
    if mask_img.size != image_size:
        raise ImageError(
            f"mask {path} size {mask_img.size} does not match "
            f"image size {image_size}"
        )
    binary = (np.asarray(mask_img.convert("L")) > 0).astype(np.uint8)
    resized = Image.fromarray(binary * 255).resize(
        (resolution, resolution), Image.Resampling.NEAREST
    )
    return (np.asarray(resized) > 0).astype(np.uint8)
