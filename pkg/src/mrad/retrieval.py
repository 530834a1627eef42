"""Softmax similarity retrieval against the memory bank.

Scoring is cross-attention over stored feature-label pairs: a query row q
produces softmax(q K^T / tau) V, whose anomaly channel is the anomaly
score. The train-free path uses raw cosine logits; the fine-tuned path
inserts linear maps W_q, W_k into the logit computation and, during
training only, drops each query's most similar memory entries.
"""

from __future__ import annotations

import numpy as np

from .membank import patch_labels_for
from .types import (
    DatasetStats,
    ImageRecord,
    MemoryBank,
    MetricWeights,
    NumericalError,
    PatchGrid,
    RetrievalOutput,
    RetrievalParams,
    ValidationError,
    as_float64,
    l2_normalize,
)


def softmax_rows(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax in float64 with max subtraction.

    ``mask`` is boolean with True marking excluded entries (their logits
    become -inf). Raises if any row has every entry masked.
    """
    logits = as_float64(logits)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ValidationError(f"mask shape {mask.shape} != logits shape {logits.shape}")
        if np.any(mask.all(axis=-1)):
            raise ValidationError("every key is masked for at least one query")
        logits = np.where(mask, -np.inf, logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_retrieve(Q, K, V, tau: float, mask=None) -> np.ndarray:
    """Retrieve label posteriors for query rows Q against memory (K, V).

    Returns an (m, 2) array whose rows are probability vectors: the
    softmax over (Q K^T / tau) applied to the one-hot value rows.
    """
    Q, K, V = as_float64(Q), as_float64(K), as_float64(V)
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if Q.ndim != 2 or K.ndim != 2 or Q.shape[1] != K.shape[1]:
        raise ValidationError(f"query dim {Q.shape} incompatible with keys {K.shape}")
    if V.shape != (K.shape[0], 2):
        raise ValidationError(f"values shape {V.shape} != ({K.shape[0]}, 2)")
    for name, a in (("Q", Q), ("K", K), ("V", V)):
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"{name} contains non-finite values")
    logits = (Q @ K.T) / tau
    return softmax_rows(logits, mask) @ V


def top_similarity_mask(raw_sim: np.ndarray, rho: float) -> np.ndarray:
    """Similarity-dropout mask: per query, drop the floor(rho*N) most
    similar memory entries.

    ``raw_sim`` holds un-projected similarities Q K^T, so the masked set
    does not move with the evolving metric weights. Ties break toward the
    lower memory index. Returns the boolean form of the per-query masked
    index sets (True = masked); rho values with floor(rho*N) == 0 yield a
    no-op mask.
    """
    raw_sim = as_float64(raw_sim)
    if raw_sim.ndim != 2:
        raise ValidationError(f"raw similarities must be 2-D, got {raw_sim.shape}")
    m, n = raw_sim.shape
    count = int(np.floor(rho * n))
    if count >= n:
        raise ValidationError(f"rho={rho} would mask all {n} memory entries")
    mask = np.zeros((m, n), dtype=bool)
    if count == 0:
        return mask
    # Stable sort on the negated similarities: ties keep ascending index order.
    order = np.argsort(-raw_sim, axis=1, kind="stable")[:, :count]
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _query_arrays(record: ImageRecord, bank: MemoryBank):
    cls = np.asarray(record.cls_feature)
    pat = np.asarray(record.patch_features)
    if cls.shape[-1] != bank.d or pat.shape[-1] != bank.d:
        raise ValidationError(
            f"record {record.id!r} feature dim {cls.shape[-1]} != bank dim {bank.d}"
        )
    # Defensive re-normalization: packs may carry unnormalized features.
    return l2_normalize(cls).reshape(1, -1), l2_normalize(pat)


def retrieve_tf(record: ImageRecord, bank: MemoryBank, params: RetrievalParams) -> RetrievalOutput:
    """Train-free retrieval: image-level and per-patch label posteriors."""
    q_cls, q_pat = _query_arrays(record, bank)
    y_cls = masked_softmax_retrieve(q_cls, bank.K_cls, bank.V_cls, params.tau)[0]
    y_seg = masked_softmax_retrieve(q_pat, bank.K_pat, bank.V_pat, params.tau)
    return RetrievalOutput(y_cls=y_cls, y_seg=y_seg)


def retrieve_ft(
    record: ImageRecord,
    bank: MemoryBank,
    weights: MetricWeights,
    params: RetrievalParams,
    training: bool = False,
) -> RetrievalOutput:
    """Fine-tuned retrieval: logits use (Q W_q)(K W_k)^T / tau.

    With ``training=True`` the similarity-dropout mask (computed from the
    un-projected Q K^T) removes each query's top rho fraction of matches;
    at inference all matches are retained. With identity weights and no
    mask this reproduces :func:`retrieve_tf` bit for bit.
    """
    if weights.d != bank.d:
        raise ValidationError(f"weights dim {weights.d} != bank dim {bank.d}")
    q_cls, q_pat = _query_arrays(record, bank)
    k_cls, k_pat = as_float64(bank.K_cls), as_float64(bank.K_pat)
    mask_cls = mask_pat = None
    if training:
        mask_cls = top_similarity_mask(q_cls @ k_cls.T, params.rho_cls)
        mask_pat = top_similarity_mask(q_pat @ k_pat.T, params.rho_seg)
    y_cls = masked_softmax_retrieve(
        q_cls @ weights.Wq_cls, k_cls @ weights.Wk_cls, bank.V_cls, params.tau, mask_cls
    )[0]
    y_seg = masked_softmax_retrieve(
        q_pat @ weights.Wq_seg, k_pat @ weights.Wk_seg, bank.V_pat, params.tau, mask_pat
    )
    return RetrievalOutput(y_cls=y_cls, y_seg=y_seg)


def dataset_statistics(
    queries,
    grid: PatchGrid,
    bank: MemoryBank,
    params: RetrievalParams,
    weights: MetricWeights | None = None,
) -> DatasetStats:
    """Aggregate mean anomaly similarities over anomalous/normal query patches.

    Query patch labels come from the downsampled mask (normal images count
    as all-normal); anomalous images without masks contribute nothing.
    A side with no patches yields ``None`` statistics rather than zeros.
    Retrieval runs at inference settings (no similarity dropout).
    """
    anom_scores: list[np.ndarray] = []
    norm_scores: list[np.ndarray] = []
    for rec in queries:
        labels = patch_labels_for(rec, grid)
        if labels is None:
            continue
        if weights is not None:
            out = retrieve_ft(rec, bank, weights, params, training=False)
        else:
            out = retrieve_tf(rec, bank, params)
        s_anom = out.y_seg[:, 1]
        anom_scores.append(s_anom[labels != 0])
        norm_scores.append(s_anom[labels == 0])

    s_a = np.concatenate(anom_scores) if anom_scores else np.empty(0)
    s_n = np.concatenate(norm_scores) if norm_scores else np.empty(0)
    aqak = float(s_a.mean()) if s_a.size else None
    nqak = float(s_n.mean()) if s_n.size else None
    aqnk = 1.0 - aqak if aqak is not None else None
    nqnk = 1.0 - nqak if nqak is not None else None
    margin_a = aqak - nqak if (aqak is not None and nqak is not None) else None
    margin_n = nqnk - aqnk if (nqnk is not None and aqnk is not None) else None
    return DatasetStats(
        AqAk=aqak,
        NqAk=nqak,
        AqNk=aqnk,
        NqNk=nqnk,
        margin_A=margin_a,
        margin_N=margin_n,
        n_anomalous_queries=int(s_a.size),
        n_normal_queries=int(s_n.size),
    )
