"""Metric fine-tuning: losses, analytic gradients, and the Adam loop.

Only the four linear maps in :class:`MetricWeights` are trainable; the
memory bank and the features are frozen. The objective per image is the
unweighted sum of a binary cross-entropy on the image-level anomaly
posterior and Dice plus focal terms on the patch-level posteriors at grid
resolution. All gradients are closed-form; no autodiff framework is
involved, which keeps the dependency surface at numpy and makes the
backward pass directly checkable against finite differences.
"""

from __future__ import annotations

import numpy as np

from .membank import patch_labels_for
from .retrieval import _query_arrays, softmax_rows, top_similarity_mask
from .types import (
    LossBreakdown,
    MemoryBank,
    MetricWeights,
    NumericalError,
    PatchGrid,
    RetrievalParams,
    TrainConfig,
    ValidationError,
    as_float64,
)

# Probabilities are clamped away from {0, 1} before any logarithm.
CLAMP_EPS = 1e-7
DICE_SMOOTHING = 1.0
FOCAL_GAMMA = 2.0

_WEIGHT_NAMES = ("Wq_cls", "Wk_cls", "Wq_seg", "Wk_seg")


# ---------------------------------------------------------------------------
# Loss components. Each *_grad returns the derivative of the matching loss
# with respect to the raw (unclamped) probability input, i.e. the exact
# derivative of the implemented forward including the clamp's dead zones.


def bce_loss(p_anom: float, label: int) -> float:
    """Binary cross-entropy of a single anomaly probability."""
    p = float(np.clip(p_anom, CLAMP_EPS, 1.0 - CLAMP_EPS))
    return float(-(label * np.log(p) + (1 - label) * np.log1p(-p)))


def bce_grad(p_anom: float, label: int) -> float:
    if not CLAMP_EPS < p_anom < 1.0 - CLAMP_EPS:
        return 0.0
    return float(-label / p_anom + (1 - label) / (1.0 - p_anom))


def dice_loss(p: np.ndarray, t: np.ndarray, smoothing: float = DICE_SMOOTHING) -> float:
    """Soft Dice loss between patch probabilities and binary targets."""
    p, t = as_float64(p), as_float64(t)
    num = 2.0 * float(p @ t) + smoothing
    den = float(p.sum() + t.sum()) + smoothing
    return 1.0 - num / den


def dice_grad(p: np.ndarray, t: np.ndarray, smoothing: float = DICE_SMOOTHING) -> np.ndarray:
    p, t = as_float64(p), as_float64(t)
    num = 2.0 * float(p @ t) + smoothing
    den = float(p.sum() + t.sum()) + smoothing
    return -(2.0 * t * den - num) / (den * den)


def focal_loss(p: np.ndarray, t: np.ndarray, gamma: float = FOCAL_GAMMA) -> float:
    """Mean focal loss over patches (no class weighting)."""
    p = np.clip(as_float64(p), CLAMP_EPS, 1.0 - CLAMP_EPS)
    t = as_float64(t)
    p_t = np.where(t != 0, p, 1.0 - p)
    return float(np.mean(-((1.0 - p_t) ** gamma) * np.log(p_t)))


def focal_grad(p_raw: np.ndarray, t: np.ndarray, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    p_raw = as_float64(p_raw)
    t = as_float64(t)
    p = np.clip(p_raw, CLAMP_EPS, 1.0 - CLAMP_EPS)
    inside = (p_raw > CLAMP_EPS) & (p_raw < 1.0 - CLAMP_EPS)
    pos = gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - (1.0 - p) ** gamma / p
    neg = -gamma * p ** (gamma - 1.0) * np.log1p(-p) + p ** gamma / (1.0 - p)
    g = np.where(t != 0, pos, neg)
    return np.where(inside, g, 0.0) / p.size


# ---------------------------------------------------------------------------
# Forward/backward through one retrieval head.


def _head_forward(q, k, v, wq, wk, tau, mask):
    qp = q @ wq
    kp = k @ wk
    probs = softmax_rows((qp @ kp.T) / tau, mask)
    return probs @ v, (q, k, v, qp, kp, probs)


def _head_backward(dy, cache, tau):
    """Gradients of the head output w.r.t. (wq, wk) given upstream dy.

    Softmax backward per row: dA = P * (dP - <dP, P>); masked entries have
    P = 0 and therefore contribute nothing. The 1/tau factor folds into
    the logit gradient before it propagates into the projections.
    """
    q, k, v, qp, kp, probs = cache
    dp = dy @ v.T
    da = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
    g = da / tau
    d_wq = q.T @ (g @ kp)
    d_wk = k.T @ (g.T @ qp)
    return d_wq, d_wk


def forward_backward(
    batch,
    grid: PatchGrid,
    bank: MemoryBank,
    weights: MetricWeights,
    params: RetrievalParams,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Training forward and analytic backward over a batch of records.

    Applies the similarity-dropout masks (this is the training-time
    forward). Every image contributes the image-level BCE term; Dice and
    focal terms apply where patch labels are derivable, i.e. anomalous
    images with masks and normal images (implicit all-normal label grid).
    Anomalous images without masks contribute the BCE term only.

    Returns batch-mean losses and batch-mean gradients for the four
    metric matrices.
    """
    batch = list(batch)
    if not batch:
        raise ValidationError("batch must contain at least one record")
    if weights.d != bank.d:
        raise ValidationError(f"weights dim {weights.d} != bank dim {bank.d}")

    k_cls, v_cls = as_float64(bank.K_cls), as_float64(bank.V_cls)
    k_pat, v_pat = as_float64(bank.K_pat), as_float64(bank.V_pat)
    w = weights.matrices()

    grads = {name: np.zeros((bank.d, bank.d)) for name in _WEIGHT_NAMES}
    bce_sum = dice_sum = focal_sum = 0.0

    for rec in batch:
        q_cls, q_pat = _query_arrays(rec, bank)

        mask_cls = top_similarity_mask(q_cls @ k_cls.T, params.rho_cls)
        y_cls, cache_cls = _head_forward(
            q_cls, k_cls, v_cls, w["Wq_cls"], w["Wk_cls"], params.tau, mask_cls
        )
        p_img = float(y_cls[0, 1])
        bce_sum += bce_loss(p_img, rec.label)
        dy_cls = np.array([[0.0, bce_grad(p_img, rec.label)]])
        d_wq, d_wk = _head_backward(dy_cls, cache_cls, params.tau)
        grads["Wq_cls"] += d_wq
        grads["Wk_cls"] += d_wk

        targets = patch_labels_for(rec, grid)
        if targets is None:
            continue
        t = as_float64(targets)
        mask_pat = top_similarity_mask(q_pat @ k_pat.T, params.rho_seg)
        y_seg, cache_seg = _head_forward(
            q_pat, k_pat, v_pat, w["Wq_seg"], w["Wk_seg"], params.tau, mask_pat
        )
        p_vec = y_seg[:, 1]
        dice_sum += dice_loss(p_vec, t)
        focal_sum += focal_loss(p_vec, t)
        dy_seg = np.zeros_like(y_seg)
        dy_seg[:, 1] = dice_grad(p_vec, t) + focal_grad(p_vec, t)
        d_wq, d_wk = _head_backward(dy_seg, cache_seg, params.tau)
        grads["Wq_seg"] += d_wq
        grads["Wk_seg"] += d_wk

    b = float(len(batch))
    for name in _WEIGHT_NAMES:
        grads[name] /= b
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient for {name}")
    losses = LossBreakdown(bce=bce_sum / b, dice=dice_sum / b, focal=focal_sum / b)
    if not np.isfinite(losses.total):
        raise NumericalError("non-finite training loss")
    return losses, grads


def batch_loss(batch, grid, bank, weights, params) -> float:
    """Total batch loss under training-time masking (finite-difference probe)."""
    losses, _ = forward_backward(batch, grid, bank, weights, params)
    return losses.total


class AdamState:
    """Per-matrix Adam accumulators (first/second moments, shared step count)."""

    def __init__(self, shapes: dict[str, tuple[int, int]]):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def update(self, mats: dict[str, np.ndarray], grads: dict[str, np.ndarray], cfg: TrainConfig):
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            step = cfg.learning_rate * (self.m[name] / bias1) / (
                np.sqrt(self.v[name] / bias2) + cfg.adam_eps
            )
            mats[name] = mats[name] - step


def train(
    aux_records,
    grid: PatchGrid,
    bank: MemoryBank,
    config: TrainConfig | None = None,
    params: RetrievalParams | None = None,
    log_fn=None,
) -> MetricWeights:
    """Fine-tune the metric weights on auxiliary records.

    Starts from identity, shuffles once per epoch with a generator seeded
    from ``config.seed``, keeps the final partial batch, and applies Adam
    after every batch. ``epochs=0`` returns exact identity weights. The
    run is deterministic: same inputs and seed, same resulting weights.

    ``log_fn``, when given, receives one dict per step with the epoch,
    step index, loss components, and gradient norms.
    """
    config = config or TrainConfig()
    params = params or RetrievalParams()
    records = list(aux_records)
    if not records:
        raise ValidationError("training requires at least one record")

    mats = {name: np.eye(bank.d) for name in _WEIGHT_NAMES}
    state = AdamState({name: (bank.d, bank.d) for name in _WEIGHT_NAMES})
    rng = np.random.default_rng(config.seed)

    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(records), config.batch_size):
            idx = order[start : start + config.batch_size]
            weights = MetricWeights(**mats)
            losses, grads = forward_backward(
                [records[i] for i in idx], grid, bank, weights, params
            )
            state.update(mats, grads, config)
            for name in _WEIGHT_NAMES:
                if not np.all(np.isfinite(mats[name])):
                    raise NumericalError(f"{name} became non-finite at step {state.t}")
            if log_fn is not None:
                entry = {"epoch": epoch, "step": state.t, **losses.to_dict()}
                entry["grad_norms"] = {
                    name: float(np.linalg.norm(grads[name])) for name in _WEIGHT_NAMES
                }
                log_fn(entry)

    return MetricWeights(**mats)
