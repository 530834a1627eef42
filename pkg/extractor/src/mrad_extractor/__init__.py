"""Feature extraction companion to the mrad engine.

Encodes image datasets with a frozen CLIP vision tower into the
engine's feature-pack format: the class token from the stock encoder
(global branch) and patch tokens from a value-value attention rerun of
the same weights (local branch).
"""

from .datasets import ImageEntry, discover, walk_flat, walk_mvtec, walk_visa
from .encoder import DEFAULT_MODEL, DualBranchEncoder, preprocess_image
from .errors import ExtractorError, ImageError, LayoutError
from .extract import ExtractSummary, extract

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MODEL",
    "DualBranchEncoder",
    "ExtractSummary",
    "ExtractorError",
    "ImageEntry",
    "ImageError",
    "LayoutError",
    "discover",
    "extract",
    "preprocess_image",
    "walk_flat",
    "walk_mvtec",
    "walk_visa",
]
