"""Two-level memory bank construction from auxiliary feature packs.

The image level stores one (class-token key, one-hot label) entry per
image. The patch level stores region prototypes: for each image, the
L2-normalized mean of its patch features inside and outside the defect
region given by the downsampled pixel mask. Normal-labeled images are
treated as having an all-zero patch-label grid.
"""

from __future__ import annotations

from dataclasses import dataclass
import warnings

import numpy as np

from .types import (
    DegeneratePrototypeError,
    E_ANOM,
    E_NORM,
    ImageRecord,
    MemoryBank,
    PatchGrid,
    ValidationError,
    ZERO_NORM_EPS,
    as_float64,
    l2_normalize,
    one_hot_label,
    validate_record,
)

# A patch cell is labeled anomalous when at least this fraction of its
# pixel block is anomalous; mostly-normal boundary patches stay normal.
MASK_DOWNSAMPLE_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class RegionPrototypes:
    """Unit-norm mean patch features outside/inside the defect region.

    ``mu_anom`` is present iff the downsampled mask has at least one
    anomalous patch; ``mu_norm`` iff it has at least one normal patch.
    """

    mu_norm: np.ndarray | None
    mu_anom: np.ndarray | None


def downsample_mask(mask: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Reduce a pixel mask to a binary patch-label grid.

    Cell (r, c) covers the pixel block with integer-rounded boundaries
    [round(r*H/gh), round((r+1)*H/gh)) x [round(c*W/gw), round((c+1)*W/gw))
    and is labeled 1 iff the anomalous fraction within the block is at
    least MASK_DOWNSAMPLE_THRESHOLD.
    """
    mask = np.asarray(mask)
    if mask.shape != (grid.image_h, grid.image_w):
        raise ValidationError(
            f"mask shape {mask.shape} != ({grid.image_h}, {grid.image_w})"
        )
    row_bounds = np.round(np.arange(grid.grid_h + 1) * grid.image_h / grid.grid_h).astype(int)
    col_bounds = np.round(np.arange(grid.grid_w + 1) * grid.image_w / grid.grid_w).astype(int)
    if np.any(np.diff(row_bounds) < 1) or np.any(np.diff(col_bounds) < 1):
        raise ValidationError(
            f"grid {grid.grid_h}x{grid.grid_w} finer than image "
            f"{grid.image_h}x{grid.image_w}: empty pixel blocks"
        )
    binary = (mask != 0).astype(np.float64)
    block_sums = np.add.reduceat(
        np.add.reduceat(binary, row_bounds[:-1], axis=0), col_bounds[:-1], axis=1
    )
    areas = np.outer(np.diff(row_bounds), np.diff(col_bounds)).astype(np.float64)
    return (block_sums / areas >= MASK_DOWNSAMPLE_THRESHOLD).astype(np.uint8)


def region_prototypes(patch_features: np.ndarray, patch_labels: np.ndarray) -> RegionPrototypes:
    """Average patch features per region label and re-normalize.

    Expects L2-normalized features. Re-normalization after averaging keeps
    every stored key at a common scale, so retrieval dot products remain
    cosine similarities. Raises DegeneratePrototypeError if a region's
    features cancel to a near-zero mean.
    """
    feats = as_float64(patch_features)
    labels = np.asarray(patch_labels).reshape(-1)
    if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
        raise ValidationError(
            f"features {feats.shape} incompatible with labels {labels.shape}"
        )

    def mean_of(selected: np.ndarray, which: str) -> np.ndarray:
        mean = selected.mean(axis=0)
        if np.linalg.norm(mean) < ZERO_NORM_EPS:
            raise DegeneratePrototypeError(
                f"{which} patch features cancel to a near-zero mean"
            )
        return l2_normalize(mean)

    anom_sel = labels != 0
    mu_anom = mean_of(feats[anom_sel], "anomalous") if np.any(anom_sel) else None
    mu_norm = mean_of(feats[~anom_sel], "normal") if np.any(~anom_sel) else None
    return RegionPrototypes(mu_norm=mu_norm, mu_anom=mu_anom)


def patch_labels_for(rec: ImageRecord, grid: PatchGrid) -> np.ndarray | None:
    """Flat patch-label vector for a record, or None when underivable.

    Normal-labeled images have an implicit all-zero label grid even
    without a stored mask; anomalous images need a mask.
    """
    if rec.mask is not None:
        return downsample_mask(rec.mask, grid).reshape(-1)
    if rec.label == 0:
        return np.zeros(grid.u, dtype=np.uint8)
    return None


def build_bank(records, grid: PatchGrid, source_tag: str = "") -> MemoryBank:
    """Construct the two-level memory bank from auxiliary records.

    Image level: one entry per record, keyed by the normalized class
    feature. Patch level: per record, a normal prototype when it has any
    normal patch and an anomalous prototype when it has any anomalous
    patch (normal entry first, input order preserved). An anomalous image
    without a mask contributes only its image-level entry; one whose mask
    downsamples to all-zero contributes only a normal prototype.

    A bank missing one label class at either level is still returned, with
    a warning: retrieval against it is permitted but statistically
    meaningless, so callers decide.
    """
    records = list(records)
    if not records:
        raise ValidationError("cannot build a memory bank from an empty record sequence")
    d = np.asarray(records[0].cls_feature).shape[-1]

    k_cls = np.empty((len(records), d), dtype=np.float64)
    v_cls = np.empty((len(records), 2), dtype=np.float64)
    k_pat_rows: list[np.ndarray] = []
    v_pat_rows: list[np.ndarray] = []
    for i, rec in enumerate(records):
        validate_record(rec, grid, d)
        k_cls[i] = l2_normalize(rec.cls_feature)
        v_cls[i] = one_hot_label(rec.label)
        labels = patch_labels_for(rec, grid)
        if labels is None:
            continue
        protos = region_prototypes(l2_normalize(rec.patch_features), labels)
        if protos.mu_norm is not None:
            k_pat_rows.append(protos.mu_norm)
            v_pat_rows.append(E_NORM)
        if protos.mu_anom is not None:
            k_pat_rows.append(protos.mu_anom)
            v_pat_rows.append(E_ANOM)

    if not k_pat_rows:
        raise ValidationError("no record yielded patch-level entries (all anomalous without masks?)")
    bank = MemoryBank(
        K_cls=k_cls,
        V_cls=v_cls,
        K_pat=np.stack(k_pat_rows),
        V_pat=np.stack(v_pat_rows),
        d=int(d),
        source_tag=source_tag,
    )
    for level in ("cls", "pat"):
        if not bank.has_both_classes(level):
            warnings.warn(
                f"memory bank {level} level holds a single label class; "
                "retrieval against it is statistically meaningless",
                stacklevel=2,
            )
    return bank


def subsample_bank(bank: MemoryBank, n: int, seed: int) -> MemoryBank:
    """Uniformly sample ``n`` patch-level entries without replacement.

    The image-level memory is unchanged. Deterministic for a fixed seed;
    the sampled order is the generator's draw order, so ``n == N_p``
    returns a permutation of the full patch memory.
    """
    if not (1 <= n <= bank.N_p):
        raise ValidationError(f"n must be in [1, {bank.N_p}], got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(bank.N_p, size=n, replace=False)
    return MemoryBank(
        K_cls=bank.K_cls,
        V_cls=bank.V_cls,
        K_pat=bank.K_pat[idx],
        V_pat=bank.V_pat[idx],
        d=bank.d,
        source_tag=bank.source_tag,
    )
