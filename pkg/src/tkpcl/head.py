"""Patch classifier and patch-to-image pooling (top-k, max, average)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ops
from .numerics.tensor import Tensor
from .vit_encoder import EmbeddingMap

POOLING_MODES = ("topk", "max", "avg")


@dataclass
class ScoreMap:
    z: Tensor  # (s, C) or (batch, s, C); rows are softmax distributions
    class_ids: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class PoolingConfig:
    mode: str = "topk"
    k: int = 6

    def validate(self) -> None:
        if self.mode not in POOLING_MODES:
            raise ValueError(f"pooling mode must be one of {POOLING_MODES}, got {self.mode!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class ImagePrediction:
    y: Tensor  # (C,) or (batch, C)
    selected_indices: np.ndarray  # (k, C) or (batch, k, C), ascending patch index


def classify(f_out: EmbeddingMap | Tensor, w: Tensor) -> ScoreMap:
    """Row-wise softmax of ``F_out @ W``: one class distribution per patch."""
    values = f_out.values if isinstance(f_out, EmbeddingMap) else f_out
    if values.shape[-1] != w.shape[0]:
        raise ValueError(f"embedding width {values.shape[-1]} does not match classifier {w.shape}")
    z = ops.softmax(values @ w, axis=-1)
    return ScoreMap(z=z, class_ids=list(range(w.shape[1])))


def _select(z: np.ndarray, config: PoolingConfig) -> np.ndarray:
    """Indices pooled per (image, class); shape (batch, k_eff, C), sorted ascending."""
    b, s, c = z.shape
    if config.mode == "avg":
        return np.broadcast_to(np.arange(s)[None, :, None], (b, s, c)).copy()
    if config.mode == "max":
        return z.argmax(axis=1)[:, None, :]
    k = min(config.k, s)
    # stable sort on the negated scores: equal scores keep ascending patch order
    order = np.argsort(-z, axis=1, kind="stable")[:, :k, :]
    return np.sort(order, axis=1)


def pool(scores: ScoreMap | Tensor, config: PoolingConfig) -> ImagePrediction:
    """Project patch scores to image scores.

    Selected entries are summed with ``math.fsum``; the exactly rounded sum
    does not depend on visiting order, so top-k with k=s reproduces the
    average and k=1 reproduces the maximum bit for bit.  The selection is a
    constant for differentiation: each selected entry receives 1/k of the
    upstream gradient.
    """
    config.validate()
    z = scores.z if isinstance(scores, ScoreMap) else scores
    single = z.ndim == 2
    zb = z.data[None] if single else z.data
    b, s, c = zb.shape

    sel = _select(zb, config)
    k_eff = sel.shape[1]
    picked = np.take_along_axis(zb, sel, axis=1)
    if config.mode == "max":
        y = picked[:, 0, :].copy()
    else:
        y = np.empty((b, c))
        for bi in range(b):
            for ci in range(c):
                y[bi, ci] = math.fsum(picked[bi, :, ci]) / k_eff

    def backward(g):
        gb = g[None] if single else g
        full = np.zeros_like(zb)
        bi = np.arange(b)[:, None, None]
        ci = np.arange(c)[None, None, :]
        np.add.at(full, (bi, sel, ci), np.broadcast_to(gb[:, None, :] / k_eff, sel.shape))
        return (full[0] if single else full,)

    out = ops.record(y[0] if single else y, (z,), backward)
    return ImagePrediction(y=out, selected_indices=sel[0] if single else sel)


def check_epsilon(epsilon: float) -> None:
    if not 0.5 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0.5, 1) so confidence sets stay disjoint, got {epsilon}")


def confidence_masks(z: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (high, low) masks shaped like ``z``: Z > eps and Z < 1 - eps."""
    check_epsilon(epsilon)
    z = np.asarray(z)
    return z > epsilon, z < 1.0 - epsilon


def confidence_sets(scores: ScoreMap | Tensor | np.ndarray, epsilon: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per class, (high-confidence, low-confidence) patch indices of one image."""
    if isinstance(scores, ScoreMap):
        z = scores.z.data
    elif isinstance(scores, Tensor):
        z = scores.data
    else:
        z = np.asarray(scores)
    if z.ndim != 2:
        raise ValueError(f"expected an (s, C) score map, got shape {z.shape}")
    high, low = confidence_masks(z, epsilon)
    return [(np.flatnonzero(high[:, c]), np.flatnonzero(low[:, c])) for c in range(z.shape[1])]
