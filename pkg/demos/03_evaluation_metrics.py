"""The four evaluation metrics, from raw scores to a report.

Covers image AUROC, average precision, pooled pixel AUROC, and the
per-region overlap curve (PRO), including the tie conventions and the
policies that matter in practice: normal images join the pixel pool with
implicit all-zero masks, anomalous images without masks are excluded from
pixel metrics, and undefined metrics are omitted rather than zeroed.

    python3 demos/03_evaluation_metrics.py
"""

import numpy as np

from mrad import (
    RetrievalParams,
    auroc,
    average_precision,
    build_bank,
    build_report,
    category_metrics,
    image_score,
    make_task,
    pixel_auroc,
    pro,
    retrieve_tf,
    upsample_map,
)

# ----------------------------------------------------------------------
# 1. Tie handling on tiny hand-checkable inputs.

print("auroc([0.1, 0.4, 0.35, 0.8], [0,0,1,1]) =",
      auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))      # 3 of 4 pairs ordered
print("auroc with all scores tied =", auroc([0.5] * 4, [0, 1, 0, 1]))
print("average_precision([0.9, 0.8, 0.7], [1,0,1]) =",
      average_precision([0.9, 0.8, 0.7], [1, 0, 1]))   # 5/6

# ----------------------------------------------------------------------
# 2. PRO rewards covering every region, not just the big ones.
#
# Two regions: a 2x2 block and a single diagonal pixel (8-connectivity
# merges diagonals, so offset it further). A map that covers only the big
# region caps its mean overlap at 1/2 once thresholds pass the hot zone.

mask = np.zeros((8, 8), dtype=bool)
mask[1:3, 1:3] = True      # region 1: 4 pixels
mask[6, 6] = True          # region 2: 1 pixel, not adjacent
big_only = np.where(mask, 0.0, 0.0) + 0.9 * np.pad(np.ones((2, 2)), ((1, 5), (1, 5)))
both = big_only.copy()
both[6, 6] = 0.9
print(f"\nPRO covering only the 4-pixel region: {pro([big_only], [mask]):.4f}")
print(f"PRO covering both regions:            {pro([both], [mask]):.4f}")

# ----------------------------------------------------------------------
# 3. Score a synthetic query split end to end.

task = make_task(seed=42)
bank = build_bank(task.aux, task.grid)
params = RetrievalParams()

scores, labels, maps, masks = [], [], [], []
for rec in task.queries:
    out = retrieve_tf(rec, bank, params)
    gmap = out.y_seg[:, 1].reshape(task.grid.grid_h, task.grid.grid_w)
    amap = upsample_map(gmap, (task.grid.image_h, task.grid.image_w))
    scores.append(image_score(out.y_cls, amap, params))
    labels.append(rec.label)
    maps.append(amap)
    masks.append(rec.mask)  # None for normal images

metrics, counts = category_metrics(scores, labels, maps, masks)
print(f"\nsynthetic query split ({counts['images']} images, "
      f"{counts['anomalous']} anomalous):")
for name, value in sorted(metrics.items()):
    print(f"  {name:12s} {value:.4f}")

# pixel metrics can also be called directly; normal images need explicit
# zero masks in that case
explicit = [m if m is not None else np.zeros_like(maps[0], dtype=bool) for m in masks]
assert abs(pixel_auroc(maps, explicit) - metrics["pixel_auroc"]) < 1e-12

# ----------------------------------------------------------------------
# 4. Reports aggregate categories; missing metrics stay missing.
#
# The second "category" below is all-normal, so none of the four metrics
# is defined for it. The averages row covers only categories that report
# a metric; nothing is silently imputed.

normal_half = [i for i, l in enumerate(labels) if l == 0]
cat_b = ({}, {"images": len(normal_half), "anomalous": 0,
              "with_pixel_truth": len(normal_half)})
report = build_report({"synthetic": (metrics, counts), "blanks": cat_b},
                      metadata={"pro_fpr_cap": 0.3})
print("\nreport CSV:")
print(report.to_csv())
