"""Supervised contrastive losses with analytic gradients.

For an anchor ``i`` with positives ``P(i)`` (same label, excluding ``i``)
and contrast set ``A(i)`` (everything except ``i``)::

    l_i = -1/|P(i)| * sum_p log( exp(z_i.z_p / tau) / sum_a exp(z_i.z_a / tau) )

The loss is the mean of ``l_i`` over anchors with at least one positive.
Anchors without positives still act as negatives for others. All math is
float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateLabelsError, ValidationError

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    alpha: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True, eq=False)
class LossOutput:
    """Loss value and its gradient w.r.t. the (normalized) embedding rows."""

    value: float
    gradient: np.ndarray


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """Unit-norm embeddings with semantic and distortion labels.

    ``view_pair_index`` links the two augmented views of each source patch;
    it is optional for label-only losses.
    """

    vectors: np.ndarray
    semantic_labels: np.ndarray
    distortion_labels: np.ndarray
    view_pair_index: Optional[np.ndarray] = None

    def __post_init__(self):
        z = np.asarray(self.vectors, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1:
            raise ValidationError(f"vectors must be a nonempty B x D matrix, got shape {z.shape}")
        b = z.shape[0]
        norms = np.linalg.norm(z, axis=1)
        if not np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE):
            raise ValidationError("every embedding row must have unit l2 norm")
        object.__setattr__(self, "vectors", z)
        for name in ("semantic_labels", "distortion_labels"):
            lab = np.asarray(getattr(self, name)).ravel()
            if lab.shape != (b,):
                raise ValidationError(f"{name} must have one entry per row")
            object.__setattr__(self, name, lab)
        if self.view_pair_index is not None:
            pairs = np.asarray(self.view_pair_index).ravel()
            if pairs.shape != (b,):
                raise ValidationError("view_pair_index must have one entry per row")
            _, counts = np.unique(pairs, return_counts=True)
            if b % 2 or np.any(counts != 2):
                raise ValidationError("view_pair_index must pair every view with exactly one other")
            object.__setattr__(self, "view_pair_index", pairs)

    @classmethod
    def from_raw(cls, vectors, semantic_labels, distortion_labels=None, view_pair_index=None) -> "EmbeddingBatch":
        """Normalize rows first, then validate."""
        z = np.asarray(vectors, dtype=np.float64)
        z = z / np.linalg.norm(z, axis=1, keepdims=True)
        if distortion_labels is None:
            distortion_labels = semantic_labels
        return cls(z, semantic_labels, distortion_labels, view_pair_index)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


def similarity_matrix(batch: EmbeddingBatch) -> np.ndarray:
    """Pairwise dot products of the (unit) rows."""
    z = batch.vectors
    return z @ z.T


def supcon_from_arrays(z: np.ndarray, labels: np.ndarray, temperature: float) -> LossOutput:
    """Supervised contrastive loss on raw arrays; see module docstring."""
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    b = z.shape[0]
    eye = np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    npos = pos.sum(axis=1)
    anchors = npos > 0
    m = int(anchors.sum())
    if m == 0:
        raise DegenerateLabelsError("degenerate label partition: no anchor has a positive")

    logits = (z @ z.T) / temperature
    masked = np.where(eye, -np.inf, logits)
    row_max = masked.max(axis=1, keepdims=True)
    shifted = np.exp(masked - row_max)
    denom = shifted.sum(axis=1, keepdims=True)
    log_norm = row_max[:, 0] + np.log(denom[:, 0])
    softmax = shifted / denom

    # per-anchor loss: log-normalizer minus mean positive logit
    pos_logit_sum = np.where(pos, logits, 0.0).sum(axis=1)
    safe_npos = np.maximum(npos, 1)
    per_anchor = log_norm - pos_logit_sum / safe_npos
    value = float(per_anchor[anchors].sum() / m)

    # dL/dlogits, then through logits = z z^T / tau
    g = (softmax - pos / safe_npos[:, None]) * anchors[:, None] / m
    g[eye] = 0.0
    grad = (g + g.T) @ z / temperature
    return LossOutput(value, grad)


def _labels_for(batch: EmbeddingBatch, labels: str) -> np.ndarray:
    if labels == "semantic":
        return batch.semantic_labels
    if labels == "distortion":
        return batch.distortion_labels
    raise ValidationError(f"labels must be 'semantic' or 'distortion', got {labels!r}")


def supcon_loss(batch: EmbeddingBatch, labels: str = "semantic", cfg: LossConfig = LossConfig()) -> LossOutput:
    return supcon_from_arrays(batch.vectors, _labels_for(batch, labels), cfg.temperature)


def combine(alpha: float, distortion_term, semantic_term) -> LossOutput:
    """``alpha * L_DC + (1 - alpha) * L_C`` from lazily computed terms.

    A term with weight exactly 0 is never evaluated, so its partition may be
    degenerate and the other term is returned untouched.
    """
    if alpha == 0.0:
        return semantic_term()
    if alpha == 1.0:
        return distortion_term()
    dc, c = distortion_term(), semantic_term()
    return LossOutput(alpha * dc.value + (1.0 - alpha) * c.value,
                      alpha * dc.gradient + (1.0 - alpha) * c.gradient)


def combined_loss(batch: EmbeddingBatch, cfg: LossConfig = LossConfig()) -> LossOutput:
    return combine(
        cfg.alpha,
        lambda: supcon_loss(batch, "distortion", cfg),
        lambda: supcon_loss(batch, "semantic", cfg),
    )


def infonce_loss(batch: EmbeddingBatch, cfg: LossConfig = LossConfig()) -> LossOutput:
    """Self-supervised baseline: each view's only positive is its twin."""
    if batch.view_pair_index is None:
        raise ValidationError("infonce_loss requires view_pair_index")
    return supcon_from_arrays(batch.vectors, batch.view_pair_index, cfg.temperature)
