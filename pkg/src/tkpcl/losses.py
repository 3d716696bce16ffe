"""Multi-label BCE on pooled scores and the patch contrastive error."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .head import ImagePrediction
from .numerics import ops
from .numerics.tensor import Tensor
from .vit_encoder import EmbeddingMap

LOG_CLAMP = 1e-12
NORM_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    mce: float
    pce_per_class: dict[int, float]
    pce_total: float
    total: float
    alpha: float
    n_pair_pos: dict[int, int] = field(default_factory=dict)
    n_pair_neg: dict[int, int] = field(default_factory=dict)


def label_vector(labels, n_total_classes: int, background: bool = True) -> np.ndarray:
    """0/1 targets over all classes; background (id 0) is always present."""
    t = np.zeros(n_total_classes)
    for c in labels:
        t[int(c)] = 1.0
    if background:
        t[0] = 1.0
    return t


def mce(y: ImagePrediction | Tensor, t) -> Tensor:
    """Mean over classes of binary cross-entropy; one value per image."""
    y = y.y if isinstance(y, ImagePrediction) else y
    t = np.asarray(t, dtype=np.float64)
    if y.shape != t.shape:
        raise ValueError(f"prediction shape {y.shape} != target shape {t.shape}")
    yc = ops.clip(y, LOG_CLAMP, 1.0 - LOG_CLAMP)
    ll = t * ops.log(yc) + (1.0 - t) * ops.log(1.0 - yc)
    return -ll.mean(axis=-1)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(u @ v / (max(np.linalg.norm(u), NORM_FLOOR) * max(np.linalg.norm(v), NORM_FLOOR)))


def norm_sim(u, v) -> float:
    return (1.0 + cosine(u, v)) / 2.0


def similarity_matrix(values: Tensor) -> Tensor:
    """Normalised cosine similarity (1 + cos) / 2 between all patch pairs, (..., s, s)."""
    norms = ops.sqrt((values * values).sum(axis=-1, keepdims=True))
    unit = values / ops.maximum(norms, NORM_FLOOR)
    cos = unit @ ops.transpose(unit, tuple(range(unit.ndim - 2)) + (unit.ndim - 1, unit.ndim - 2))
    return (cos + 1.0) * 0.5


def pair_counts(high: np.ndarray, low: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ordered high/high pairs (i != j) and high/low pairs, per (image, class)."""
    n_high = high.sum(axis=1)
    n_low = low.sum(axis=1)
    return n_high * (n_high - 1), n_high * n_low


def _inverse_or_zero(n: np.ndarray) -> np.ndarray:
    out = np.zeros(n.shape)
    np.divide(1.0, n, out=out, where=n > 0)
    return out


def pce_batch(values: Tensor, high: np.ndarray, low: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-image, per-class PCE for embeddings (batch, s, e) under frozen sets.

    ``high``/``low`` are boolean (batch, s, C).  Returns (pce (batch, C),
    n_pos, n_neg).  A term with no pairs contributes 0; classes to skip
    should arrive with empty ``high`` columns.
    """
    n_pos, n_neg = pair_counts(high, low)
    s = values.shape[1]
    sbar = similarity_matrix(values) * (1.0 - np.eye(s))  # self-pairs never count
    h = np.ascontiguousarray(high.transpose(0, 2, 1), dtype=np.float64)  # (b, C, s)
    lo = np.ascontiguousarray(low.transpose(0, 2, 1), dtype=np.float64)
    h_sim = h @ sbar  # (b, C, s): row m holds sum_j H_j * Sbar(j, m)
    pos_sim = (h_sim * h).sum(axis=-1)
    neg_sim = (h_sim * lo).sum(axis=-1)
    has_pos = (n_pos > 0).astype(np.float64)
    pull = has_pos - pos_sim * _inverse_or_zero(n_pos)
    push = neg_sim * _inverse_or_zero(n_neg)
    return pull + push, n_pos, n_neg


def pce_class(f_out: EmbeddingMap | Tensor, p_high: Sequence[int], p_low: Sequence[int]) -> Tensor:
    """Patch contrastive error of one class in one image (sets held constant)."""
    values = f_out.values if isinstance(f_out, EmbeddingMap) else f_out
    if values.ndim != 2:
        raise ValueError(f"expected (s, e) embeddings, got {values.shape}")
    s = values.shape[0]
    high = np.zeros((1, s, 1), dtype=bool)
    low = np.zeros((1, s, 1), dtype=bool)
    high[0, list(p_high), 0] = True
    low[0, list(p_low), 0] = True
    if np.any(high & low):
        raise ValueError("high- and low-confidence sets overlap")
    pce, _, _ = pce_batch(values.reshape(1, *values.shape), high, low)
    return pce.reshape(())


def total_loss(mce_value: Tensor, pce_per_class, alpha: float) -> Tensor:
    """MCE plus alpha times the sum of per-class PCE terms."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if isinstance(pce_per_class, dict):
        terms = [pce_per_class[c] for c in sorted(pce_per_class)]
        if not terms:
            return ops.as_tensor(mce_value) + 0.0
        pce_sum = terms[0]
        for t in terms[1:]:
            pce_sum = pce_sum + t
    else:
        pce_sum = ops.as_tensor(pce_per_class).sum(axis=-1)
    return mce_value + alpha * pce_sum
