"""Anomaly detection metrics: AUROC, average precision, and the
region-overlap curve for segmentation quality.

All metrics are tie-aware. AUROC uses average ranks, average precision
steps once per distinct score value, and the region-overlap sweep treats
equal scores as a single threshold. Single-class inputs raise
UndefinedMetricError instead of returning a misleading number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import label as _connected_components
from scipy.stats import rankdata

from .types import (
    SCHEMA_VERSION,
    NumericalError,
    UndefinedMetricError,
    ValidationError,
    as_float64,
)

# 8-connectivity: diagonal neighbors belong to the same defect region.
_CONNECTIVITY = np.ones((3, 3), dtype=int)

PRO_FPR_CAP = 0.3
PRO_THRESHOLD_COUNT = 200


def _validate_scores_labels(scores, labels):
    s = as_float64(scores).ravel()
    y = np.asarray(labels).ravel()
    if s.size == 0:
        raise ValidationError("scores are empty")
    if s.shape != y.shape:
        raise ValidationError(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
    if not np.all(np.isfinite(s)):
        raise NumericalError("scores contain non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be binary")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via tie-averaged ranks.

    Equals the probability that a uniformly random positive outranks a
    uniformly random negative, with ties counting one half.
    """
    s, y = _validate_scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Average precision with one step per distinct score value.

    AP = sum over steps of (recall_k - recall_{k-1}) * precision_k, where
    each step admits every sample tied at that score simultaneously.
    Requires at least one positive; an all-positive input scores 1.0.
    """
    s, y = _validate_scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # Last index of each tie group in descending order.
    boundary = np.nonzero(np.diff(s_sorted))[0]
    ends = np.concatenate([boundary, [s_sorted.size - 1]])
    tp = np.cumsum(y_sorted)[ends]
    predicted = ends + 1
    precision = tp / predicted
    recall = tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * precision))


def _paired_pixel_arrays(anomaly_maps, masks):
    """Flatten per-image (map, mask) pairs into pooled score/label vectors."""
    maps = list(anomaly_maps)
    truths = list(masks)
    if len(maps) != len(truths) or not maps:
        raise ValidationError("need equal, nonzero numbers of maps and masks")
    scores, labels = [], []
    for i, (m, t) in enumerate(zip(maps, truths)):
        m = as_float64(m)
        t = np.asarray(t)
        if m.shape != t.shape or m.ndim != 2:
            raise ValidationError(
                f"pair {i}: map shape {m.shape} does not match mask shape {t.shape}"
            )
        scores.append(m.ravel())
        labels.append((t != 0).ravel().astype(np.int64))
    return np.concatenate(scores), np.concatenate(labels)


def pixel_auroc(anomaly_maps, masks) -> float:
    """AUROC over pixels pooled across all given images."""
    scores, labels = _paired_pixel_arrays(anomaly_maps, masks)
    return auroc(scores, labels)


def _pro_thresholds(all_scores: np.ndarray, count: int) -> np.ndarray:
    """Quantile thresholds snapped to actual score values, descending, unique."""
    sorted_scores = np.sort(all_scores)
    idx = np.floor(np.linspace(0.0, 1.0, count) * (sorted_scores.size - 1)).astype(np.intp)
    return np.unique(sorted_scores[idx])[::-1]


def pro(anomaly_maps, masks, fpr_cap: float = PRO_FPR_CAP,
        n_thresholds: int = PRO_THRESHOLD_COUNT) -> float:
    """Per-region overlap score: area under (FPR, mean region overlap) up
    to ``fpr_cap``, normalized by the cap.

    Defect regions are 8-connected components of the masks. For each
    threshold t the prediction is ``map >= t``; the curve point is the
    pooled normal-pixel FPR against the mean per-region overlap fraction.
    Thresholds are data quantiles snapped to observed values, so a
    constant map yields a single point (FPR 1, overlap 1) and, with the
    horizontal extension to FPR 0, a score of exactly 1.0.
    """
    if not 0.0 < fpr_cap <= 1.0:
        raise ValidationError(f"fpr_cap must be in (0, 1], got {fpr_cap}")
    if n_thresholds < 2:
        raise ValidationError(f"need at least 2 thresholds, got {n_thresholds}")
    maps = [as_float64(m) for m in anomaly_maps]
    truths = [np.asarray(t) != 0 for t in masks]
    if len(maps) != len(truths) or not maps:
        raise ValidationError("need equal, nonzero numbers of maps and masks")

    region_values: list[np.ndarray] = []  # sorted scores inside each defect region
    normal_values: list[np.ndarray] = []
    all_values: list[np.ndarray] = []
    for i, (m, t) in enumerate(zip(maps, truths)):
        if m.shape != t.shape or m.ndim != 2:
            raise ValidationError(
                f"pair {i}: map shape {m.shape} does not match mask shape {t.shape}"
            )
        if not np.all(np.isfinite(m)):
            raise NumericalError(f"pair {i}: anomaly map contains non-finite values")
        labeled, n_regions = _connected_components(t, structure=_CONNECTIVITY)
        for rid in range(1, n_regions + 1):
            region_values.append(np.sort(m[labeled == rid]))
        normal_values.append(m[~t])
        all_values.append(m.ravel())
    if not region_values:
        raise UndefinedMetricError("region overlap needs at least one defect region")
    normal = np.sort(np.concatenate(normal_values))
    if normal.size == 0:
        raise UndefinedMetricError("region overlap needs at least one normal pixel")

    thresholds = _pro_thresholds(np.concatenate(all_values), n_thresholds)
    # Fraction of pixels >= t, per region and for the pooled normal pixels.
    overlaps = np.zeros(thresholds.size)
    for vals in region_values:
        overlaps += (vals.size - np.searchsorted(vals, thresholds, side="left")) / vals.size
    overlaps /= len(region_values)
    fprs = (normal.size - np.searchsorted(normal, thresholds, side="left")) / normal.size

    return _area_to_cap(fprs, overlaps, fpr_cap)


def _area_to_cap(fprs: np.ndarray, overlaps: np.ndarray, cap: float) -> float:
    """Trapezoidal area under the curve for FPR in [0, cap], divided by cap.

    The curve extends horizontally left from its first point to FPR 0 and
    is interpolated linearly where a segment crosses the cap.
    """
    xs = np.concatenate([[0.0], fprs])
    ys = np.concatenate([[overlaps[0]], overlaps])
    area = 0.0
    for i in range(1, xs.size):
        x0, y0, x1, y1 = xs[i - 1], ys[i - 1], xs[i], ys[i]
        if x0 >= cap:
            break
        if x1 <= x0:
            continue
        if x1 > cap:
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return float(area / cap)


@dataclass(frozen=True)
class EvalReport:
    """Per-category metric tables plus cross-category averages.

    ``per_category`` maps category name to the metrics that were defined
    for it; a metric missing for a category is absent, not zero, and the
    average for a metric covers only the categories reporting it.
    """

    per_category: dict[str, dict[str, float]]
    averages: dict[str, float]
    counts: dict[str, dict[str, int]]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "per_category": {c: dict(m) for c, m in sorted(self.per_category.items())},
            "averages": dict(self.averages),
            "counts": {c: dict(n) for c, n in sorted(self.counts.items())},
            "metadata": dict(self.metadata),
        }

    def to_csv(self) -> str:
        """Render as CSV: one row per category plus a final mean row."""
        metric_names = sorted({k for m in self.per_category.values() for k in m})
        lines = ["category," + ",".join(metric_names)]
        for cat in sorted(self.per_category):
            row = [cat]
            for name in metric_names:
                v = self.per_category[cat].get(name)
                row.append("" if v is None else f"{v:.6f}")
            lines.append(",".join(row))
        mean_row = ["mean"]
        for name in metric_names:
            v = self.averages.get(name)
            mean_row.append("" if v is None else f"{v:.6f}")
        lines.append(",".join(mean_row))
        return "\n".join(lines) + "\n"


def category_metrics(image_scores, image_labels, anomaly_maps, masks,
                     pro_fpr_cap: float = PRO_FPR_CAP) -> tuple[dict, dict]:
    """Every defined metric for one category, plus sample counts.

    Image-level metrics use ``image_scores`` against ``image_labels``.
    Pixel-level metrics pool images with pixel ground truth: anomalous
    images contribute only when a mask is present; normal images always
    contribute an implicit all-zero mask. Undefined metrics are omitted.
    """
    scores = [float(s) for s in image_scores]
    labels = [int(l) for l in image_labels]
    maps = list(anomaly_maps)
    truths = list(masks)
    if not (len(scores) == len(labels) == len(maps) == len(truths)):
        raise ValidationError("per-image inputs differ in length")

    metrics: dict[str, float] = {}
    try:
        metrics["image_auroc"] = auroc(scores, labels)
    except UndefinedMetricError:
        pass
    try:
        metrics["image_ap"] = average_precision(scores, labels)
    except UndefinedMetricError:
        pass

    px_maps, px_masks = [], []
    for lab, m, t in zip(labels, maps, truths):
        if lab == 0:
            px_maps.append(m)
            px_masks.append(np.zeros_like(np.asarray(m)) if t is None else t)
        elif t is not None:
            px_maps.append(m)
            px_masks.append(t)
    if px_maps:
        try:
            metrics["pixel_auroc"] = pixel_auroc(px_maps, px_masks)
        except UndefinedMetricError:
            pass
        try:
            metrics["pro"] = pro(px_maps, px_masks, fpr_cap=pro_fpr_cap)
        except UndefinedMetricError:
            pass

    counts = {
        "images": len(scores),
        "anomalous": int(sum(labels)),
        "with_pixel_truth": len(px_maps),
    }
    return metrics, counts


def build_report(categories: dict[str, tuple[dict, dict]], metadata: dict | None = None) -> EvalReport:
    """Assemble an EvalReport from per-category (metrics, counts) pairs."""
    if not categories:
        raise ValidationError("report needs at least one category")
    per_category = {c: m for c, (m, _) in categories.items()}
    counts = {c: n for c, (_, n) in categories.items()}
    names = sorted({k for m in per_category.values() for k in m})
    averages = {}
    for name in names:
        vals = [m[name] for m in per_category.values() if name in m]
        averages[name] = float(np.mean(vals))
    return EvalReport(
        per_category=per_category, averages=averages, counts=counts,
        metadata=dict(metadata or {}),
    )
