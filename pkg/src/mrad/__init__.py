"""Memory-retrieval anomaly detection.

Build a two-level feature-label memory bank from auxiliary-domain image
features, score query images and pixels by softmax similarity retrieval,
optionally fine-tune the retrieval metric with two linear maps per head,
and evaluate with the standard anomaly-detection metric suite.
"""

import os as _os

# MRAD_THREADS caps internal parallelism. The heavy lifting happens in
# BLAS threadpools, which read their env vars at import time, so the cap
# must propagate before numpy loads (this module is imported first).
_threads = _os.environ.get("MRAD_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

from .finetune import (
    bce_loss,
    dice_loss,
    focal_loss,
    forward_backward,
    train,
)
from .membank import (
    build_bank,
    downsample_mask,
    patch_labels_for,
    region_prototypes,
    subsample_bank,
)
from .metrics import (
    EvalReport,
    auroc,
    average_precision,
    build_report,
    category_metrics,
    pixel_auroc,
    pro,
)
from .packio import (
    load_bank,
    load_weights,
    read_anomaly_map,
    read_feature_pack,
    save_bank,
    save_weights,
    write_anomaly_map,
    write_feature_pack,
)
from .retrieval import (
    dataset_statistics,
    masked_softmax_retrieve,
    retrieve_ft,
    retrieve_tf,
    top_similarity_mask,
)
from .scoring import image_score, topk_mean, upsample_map
from .synthetic import SyntheticTask, make_task
from .types import (
    DatasetStats,
    DegeneratePrototypeError,
    ImageRecord,
    LossBreakdown,
    MemoryBank,
    MetricWeights,
    MradError,
    NumericalError,
    PackFormatError,
    PatchGrid,
    RetrievalOutput,
    RetrievalParams,
    TrainConfig,
    UndefinedMetricError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetStats",
    "DegeneratePrototypeError",
    "EvalReport",
    "ImageRecord",
    "LossBreakdown",
    "MemoryBank",
    "MetricWeights",
    "MradError",
    "NumericalError",
    "PackFormatError",
    "PatchGrid",
    "RetrievalOutput",
    "RetrievalParams",
    "SyntheticTask",
    "TrainConfig",
    "UndefinedMetricError",
    "ValidationError",
    "auroc",
    "average_precision",
    "bce_loss",
    "build_bank",
    "build_report",
    "category_metrics",
    "dataset_statistics",
    "dice_loss",
    "downsample_mask",
    "focal_loss",
    "forward_backward",
    "image_score",
    "load_bank",
    "load_weights",
    "make_task",
    "masked_softmax_retrieve",
    "patch_labels_for",
    "pixel_auroc",
    "pro",
    "read_anomaly_map",
    "read_feature_pack",
    "region_prototypes",
    "retrieve_ft",
    "retrieve_tf",
    "save_bank",
    "save_weights",
    "subsample_bank",
    "top_similarity_mask",
    "topk_mean",
    "train",
    "upsample_map",
    "write_anomaly_map",
    "write_feature_pack",
]
