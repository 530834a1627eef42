"""Shared domain types, validation helpers, and error hierarchy.

Conventions used throughout the package:

* features are stored as float32 and promoted to float64 for every
  reduction (dot products, softmax normalizers, metric accumulations);
* feature keys and query vectors are L2-normalized, so dot products are
  cosine similarities;
* labels are two-channel one-hot rows ``[normal, anomaly]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Version stamp carried by every JSON document the package emits.
SCHEMA_VERSION = 1

# Channel layout of one-hot label rows.
NORMAL_CHANNEL = 0
ANOMALY_CHANNEL = 1
E_NORM = np.array([1.0, 0.0])
E_ANOM = np.array([0.0, 1.0])

UNIT_NORM_TOL = 1e-5
ZERO_NORM_EPS = 1e-12


class MradError(Exception):
    """Base class for all package errors."""


class PackFormatError(MradError):
    """A persisted file is unreadable: bad magic, truncation, version skew."""


class ValidationError(MradError):
    """Inputs violate a documented precondition or invariant."""


class NumericalError(MradError):
    """A computation produced or received non-finite / degenerate values."""


class UndefinedMetricError(ValidationError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class DegeneratePrototypeError(NumericalError):
    """Averaged patch features cancelled to a (near-)zero vector."""


def as_float64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def l2_normalize(x, axis: int = -1) -> np.ndarray:
    """Return ``x`` scaled to unit L2 norm along ``axis`` (float64).

    Raises NumericalError for non-finite input or vectors with norm below
    ``ZERO_NORM_EPS``: a zero feature vector carries no direction and must
    be rejected rather than silently passed through.
    """
    x = as_float64(x)
    if not np.all(np.isfinite(x)):
        raise NumericalError("cannot normalize non-finite values")
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norms < ZERO_NORM_EPS):
        raise NumericalError(
            f"cannot normalize vector with norm < {ZERO_NORM_EPS}"
        )
    return x / norms


def rows_are_unit_norm(m, tol: float = UNIT_NORM_TOL) -> bool:
    norms = np.linalg.norm(as_float64(m), axis=-1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def rows_are_one_hot(v) -> bool:
    """True when every row of ``v`` is exactly [1,0] or [0,1]."""
    v = as_float64(v)
    if v.ndim != 2 or v.shape[1] != 2:
        return False
    return bool(
        np.all((v == 0.0) | (v == 1.0)) and np.all(v.sum(axis=1) == 1.0)
    )


def one_hot_label(label: int) -> np.ndarray:
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    return E_ANOM.copy() if label else E_NORM.copy()


@dataclass(frozen=True)
class PatchGrid:
    """Patch-token grid geometry and the image resolution it tiles.

    The reference encoder configuration maps a 518x518 image with patch
    size 14 onto a 37x37 grid.
    """

    grid_h: int
    grid_w: int
    image_h: int
    image_w: int

    def __post_init__(self):
        for name in ("grid_h", "grid_w", "image_h", "image_w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValidationError(f"PatchGrid.{name} must be a positive int, got {v!r}")

    @property
    def u(self) -> int:
        """Number of patch tokens per image."""
        return self.grid_h * self.grid_w

    @property
    def pixels(self) -> int:
        return self.image_h * self.image_w


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One image's identity, label, features, and optional pixel mask.

    ``patch_features`` is ``(u, d)`` in row-major grid order. ``mask`` is a
    ``(image_h, image_w)`` binary bitmap where 1 marks anomalous pixels; it
    may be absent even for anomalous images (image-level-only datasets).
    """

    id: str
    label: int
    cls_feature: np.ndarray
    patch_features: np.ndarray
    mask: np.ndarray | None = None


def validate_record(rec: ImageRecord, grid: PatchGrid, d: int) -> None:
    """Check an ImageRecord against its grid and feature dimension."""
    if rec.label not in (0, 1):
        raise ValidationError(f"record {rec.id!r}: label must be 0 or 1")
    cls = np.asarray(rec.cls_feature)
    if cls.shape != (d,):
        raise ValidationError(
            f"record {rec.id!r}: cls feature shape {cls.shape} != ({d},)"
        )
    pat = np.asarray(rec.patch_features)
    if pat.shape != (grid.u, d):
        raise ValidationError(
            f"record {rec.id!r}: patch features shape {pat.shape} != ({grid.u}, {d})"
        )
    if not (np.all(np.isfinite(cls)) and np.all(np.isfinite(pat))):
        raise NumericalError(f"record {rec.id!r}: non-finite feature values")
    if rec.mask is not None:
        mask = np.asarray(rec.mask)
        if mask.shape != (grid.image_h, grid.image_w):
            raise ValidationError(
                f"record {rec.id!r}: mask shape {mask.shape} != "
                f"({grid.image_h}, {grid.image_w})"
            )
        if rec.label == 0 and np.any(mask != 0):
            raise ValidationError(
                f"record {rec.id!r}: normal-labeled image has nonzero mask pixels"
            )


@dataclass(frozen=True, eq=False)
class MemoryBank:
    """Two-level feature-label memory: image-level and patch-level keys/values.

    Keys are unit-norm float32 rows; values are one-hot label rows. The
    image level holds one entry per source image; the patch level holds
    region prototypes.
    """

    K_cls: np.ndarray  # (N_c, d) float32, unit rows
    V_cls: np.ndarray  # (N_c, 2) float32, one-hot rows
    K_pat: np.ndarray  # (N_p, d) float32, unit rows
    V_pat: np.ndarray  # (N_p, 2) float32, one-hot rows
    d: int
    source_tag: str = ""

    def __post_init__(self):
        for name in ("K_cls", "V_cls", "K_pat", "V_pat"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        if self.K_cls.ndim != 2 or self.K_cls.shape[1] != self.d:
            raise ValidationError(f"K_cls shape {self.K_cls.shape} incompatible with d={self.d}")
        if self.K_pat.ndim != 2 or self.K_pat.shape[1] != self.d:
            raise ValidationError(f"K_pat shape {self.K_pat.shape} incompatible with d={self.d}")
        if self.V_cls.shape != (self.N_c, 2):
            raise ValidationError(f"V_cls shape {self.V_cls.shape} != ({self.N_c}, 2)")
        if self.V_pat.shape != (self.N_p, 2):
            raise ValidationError(f"V_pat shape {self.V_pat.shape} != ({self.N_p}, 2)")
        if self.N_c < 1 or self.N_p < 1:
            raise ValidationError("memory bank needs at least one entry per level")

    @property
    def N_c(self) -> int:
        return self.K_cls.shape[0]

    @property
    def N_p(self) -> int:
        return self.K_pat.shape[0]

    def has_both_classes(self, level: str) -> bool:
        """Whether the given level ('cls' or 'pat') stores both label classes."""
        v = {"cls": self.V_cls, "pat": self.V_pat}[level]
        anom = v[:, ANOMALY_CHANNEL]
        return bool(np.any(anom == 1.0) and np.any(anom == 0.0))

    def validate(self) -> None:
        """Enforce key-norm and one-hot invariants; raise ValidationError."""
        for name, k in (("K_cls", self.K_cls), ("K_pat", self.K_pat)):
            if not np.all(np.isfinite(k)):
                raise NumericalError(f"{name} contains non-finite values")
            if not rows_are_unit_norm(k):
                raise ValidationError(f"{name} rows are not unit norm within {UNIT_NORM_TOL}")
        for name, v in (("V_cls", self.V_cls), ("V_pat", self.V_pat)):
            if not rows_are_one_hot(v):
                raise ValidationError(f"{name} rows are not one-hot labels")


@dataclass(frozen=True, eq=False)
class MetricWeights:
    """Linear query/key maps for the fine-tuned retrieval metric.

    Four d x d matrices: one (W_q, W_k) pair for the classification head
    and one for the segmentation head. Fresh weights are exact identity
    matrices so an untrained fine-tuned model reproduces the train-free
    model bit for bit.
    """

    Wq_cls: np.ndarray
    Wk_cls: np.ndarray
    Wq_seg: np.ndarray
    Wk_seg: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.Wq_cls).shape[0]
        for name in ("Wq_cls", "Wk_cls", "Wq_seg", "Wk_seg"):
            m = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if m.shape != (d, d):
                raise ValidationError(f"{name} shape {m.shape} != ({d}, {d})")
            if not np.all(np.isfinite(m)):
                raise NumericalError(f"{name} contains non-finite values")
            object.__setattr__(self, name, m)

    @classmethod
    def identity(cls, d: int) -> "MetricWeights":
        eye = np.eye(d, dtype=np.float64)
        return cls(eye.copy(), eye.copy(), eye.copy(), eye.copy())

    @property
    def d(self) -> int:
        return self.Wq_cls.shape[0]

    def matrices(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ("Wq_cls", "Wk_cls", "Wq_seg", "Wk_seg")}

    def is_identity(self) -> bool:
        eye = np.eye(self.d)
        return all(np.array_equal(m, eye) for m in self.matrices().values())


@dataclass(frozen=True)
class RetrievalParams:
    """Retrieval hyperparameters.

    Defaults: temperature 1.0; similarity-dropout fractions 5% for the
    classification head and 20% for the segmentation head; top-k pooling
    over 1% of the anomaly-map pixels.
    """

    tau: float = 1.0
    rho_cls: float = 0.05
    rho_seg: float = 0.20
    topk_fraction: float = 0.01

    def __post_init__(self):
        if not (self.tau > 0):
            raise ValidationError(f"tau must be positive, got {self.tau}")
        for name in ("rho_cls", "rho_seg"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValidationError(f"{name} must be in [0, 1), got {v}")
        if not (0.0 < self.topk_fraction <= 1.0):
            raise ValidationError(
                f"topk_fraction must be in (0, 1], got {self.topk_fraction}"
            )


@dataclass(frozen=True, eq=False)
class RetrievalOutput:
    """Per-image retrieval result: image-level and per-patch label posteriors.

    ``y_cls`` is a length-2 probability vector; ``y_seg`` is ``(u, 2)`` with
    probability rows. Channel order is [normal, anomaly].
    """

    y_cls: np.ndarray
    y_seg: np.ndarray


@dataclass(frozen=True)
class DatasetStats:
    """Mean softmax anomaly/normal similarities split by query ground truth.

    ``AqAk``: mean anomaly-channel score over anomalous query patches;
    ``NqAk``: same over normal query patches; the normal-channel figures
    are their complements. A statistic is ``None`` when its query set is
    empty. ``margin_A = AqAk - NqAk`` and ``margin_N = NqNk - AqNk`` are
    the separability margins; each is ``None`` if either operand is.
    """

    AqAk: float | None
    NqAk: float | None
    AqNk: float | None
    NqNk: float | None
    margin_A: float | None
    margin_N: float | None
    n_anomalous_queries: int = 0
    n_normal_queries: int = 0

    def to_dict(self) -> dict:
        """JSON-ready dict; absent statistics are omitted, never zeroed."""
        out: dict = {
            "n_anomalous_queries": self.n_anomalous_queries,
            "n_normal_queries": self.n_normal_queries,
        }
        for name in ("AqAk", "NqAk", "AqNk", "NqNk", "margin_A", "margin_N"):
            v = getattr(self, name)
            if v is not None:
                out[name] = float(v)
        return out


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for metric fine-tuning."""

    learning_rate: float = 5e-4
    batch_size: int = 8
    epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValidationError("adam betas must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ValidationError("adam_eps must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components; ``total`` is always their exact sum."""

    bce: float
    dice: float
    focal: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.bce + self.dice + self.focal)

    def to_dict(self) -> dict:
        return {
            "bce": self.bce,
            "dice": self.dice,
            "focal": self.focal,
            "total": self.total,
        }
