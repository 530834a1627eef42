"""Synthetic feature corpora with known structure.

Features live on the unit sphere around two fixed orthogonal centers per
level (image-level and patch-level), one for normal content and one for
defects. Anomalous images carry a rectangular defect aligned to whole
patch cells, and the stored pixel mask covers exactly those cells, so the
mask-to-grid downsampling recovers the generating patch labels. That
makes the corpus a ground-truth oracle for retrieval, scoring, training,
and evaluation behavior, with difficulty set by the noise scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import ImageRecord, PatchGrid, ValidationError, l2_normalize


@dataclass(frozen=True)
class SyntheticTask:
    """A generated corpus: auxiliary records (for the bank and training)
    plus held-out query records, with the geometry they share."""

    grid: PatchGrid
    d: int
    aux: list[ImageRecord]
    queries: list[ImageRecord]


def _orthonormal_pair(rng: np.random.Generator, d: int) -> tuple[np.ndarray, np.ndarray]:
    q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    return q[:, 0].copy(), q[:, 1].copy()


def _sample(center: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    return l2_normalize(center + noise * rng.standard_normal(center.size)).astype(np.float32)


def _cell_bounds(grid: PatchGrid) -> tuple[np.ndarray, np.ndarray]:
    rows = np.round(np.arange(grid.grid_h + 1) * grid.image_h / grid.grid_h).astype(int)
    cols = np.round(np.arange(grid.grid_w + 1) * grid.image_w / grid.grid_w).astype(int)
    return rows, cols


def _defect_rect(rng: np.random.Generator, grid: PatchGrid, max_cells: int) -> tuple[int, int, int, int]:
    h = int(rng.integers(1, min(max_cells, grid.grid_h) + 1))
    w = int(rng.integers(1, min(max_cells, grid.grid_w) + 1))
    r0 = int(rng.integers(0, grid.grid_h - h + 1))
    c0 = int(rng.integers(0, grid.grid_w - w + 1))
    return r0, c0, h, w


def make_task(
    seed: int = 0,
    d: int = 16,
    grid: PatchGrid | None = None,
    n_aux_normal: int = 60,
    n_aux_anomalous: int = 40,
    n_query_normal: int = 25,
    n_query_anomalous: int = 25,
    noise: float = 0.35,
    max_defect_cells: int = 3,
) -> SyntheticTask:
    """Generate a deterministic synthetic task.

    ``noise`` is the isotropic perturbation scale before re-normalization;
    0.35 gives a task whose optimal error is well under 5%, while values
    near 1.0 approach chance. Defect rectangles span whole patch cells
    (at most ``max_defect_cells`` per side), never the full grid.
    """
    grid = grid or PatchGrid(grid_h=6, grid_w=6, image_h=24, image_w=24)
    if max_defect_cells >= max(grid.grid_h, grid.grid_w):
        raise ValidationError("defects must leave at least one normal row or column")
    rng = np.random.default_rng(seed)
    c_norm, c_anom = _orthonormal_pair(rng, d)  # patch-level centers
    g_norm, g_anom = _orthonormal_pair(rng, d)  # image-level centers
    row_bounds, col_bounds = _cell_bounds(grid)

    def normal_record(rid: str) -> ImageRecord:
        cls = _sample(g_norm, noise, rng)
        patches = np.stack([_sample(c_norm, noise, rng) for _ in range(grid.u)])
        return ImageRecord(id=rid, label=0, cls_feature=cls, patch_features=patches)

    def anomalous_record(rid: str) -> ImageRecord:
        cls = _sample(g_anom, noise, rng)
        r0, c0, h, w = _defect_rect(rng, grid, max_defect_cells)
        cell_labels = np.zeros((grid.grid_h, grid.grid_w), dtype=np.uint8)
        cell_labels[r0 : r0 + h, c0 : c0 + w] = 1
        patches = np.stack(
            [
                _sample(c_anom if lab else c_norm, noise, rng)
                for lab in cell_labels.reshape(-1)
            ]
        )
        mask = np.zeros((grid.image_h, grid.image_w), dtype=np.uint8)
        mask[
            row_bounds[r0] : row_bounds[r0 + h], col_bounds[c0] : col_bounds[c0 + w]
        ] = 1
        return ImageRecord(
            id=rid, label=1, cls_feature=cls, patch_features=patches, mask=mask
        )

    aux = [normal_record(f"aux-normal-{i:03d}") for i in range(n_aux_normal)]
    aux += [anomalous_record(f"aux-anom-{i:03d}") for i in range(n_aux_anomalous)]
    queries = [normal_record(f"query-normal-{i:03d}") for i in range(n_query_normal)]
    queries += [anomalous_record(f"query-anom-{i:03d}") for i in range(n_query_anomalous)]
    return SyntheticTask(grid=grid, d=d, aux=aux, queries=queries)
