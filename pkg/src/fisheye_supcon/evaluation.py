"""Frozen-representation probes and embedding-geometry metrics.

Probes classify patches from the encoder representation ``r`` (never the
projection output), standing in for detector fine-tuning.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .contrastive import LossConfig
from .dataset import LabeledPatch
from .errors import ValidationError
from .model import (
    AugmentationConfig,
    EncoderModel,
    ModelConfig,
    TrainConfig,
    encode,
    forward,
    init_model,
    normalize,
    pool_channel_stats,
    pretrain,
)
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class ProbeReport:
    accuracy: float
    per_class: dict[int, float]
    center_accuracy: float
    edge_accuracy: float
    gap: float
    alpha: Optional[float] = None
    scheme: Optional[str] = None
    train_losses: list[float] = field(default_factory=list, repr=False)


def _standardize(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _accuracy(mask: np.ndarray, correct: np.ndarray) -> float:
    return float(correct[mask].mean()) if mask.any() else float("nan")


def linear_probe(train_x, train_y, test_x, test_y, epochs: int = 300, lr: float = 0.5,
                 seed: int = 0, test_levels=None, num_classes: Optional[int] = None,
                 alpha: Optional[float] = None, scheme: Optional[str] = None) -> ProbeReport:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with training statistics. ``test_levels``
    (0 = center) drives the center/edge split of the report.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if np.unique(train_y).size < 2:
        raise ValidationError("linear probe needs at least two classes in the training set")
    c = num_classes or int(max(train_y.max(), test_y.max())) + 1
    xtr, xte = _standardize(train_x, test_x)
    rng = substream(seed, "probe-init")
    w = rng.normal(0.0, 0.01, size=(xtr.shape[1], c))
    b = np.zeros(c)
    onehot = np.eye(c)[train_y]
    n = xtr.shape[0]
    losses = []
    for _ in range(epochs):
        p = _softmax(xtr @ w + b)
        losses.append(float(-np.mean(np.log(p[np.arange(n), train_y] + 1e-300))))
        g = (p - onehot) / n
        w -= lr * (xtr.T @ g)
        b -= lr * g.sum(axis=0)
    p = _softmax(xtr @ w + b)
    losses.append(float(-np.mean(np.log(p[np.arange(n), train_y] + 1e-300))))

    pred = np.argmax(xte @ w + b, axis=1)
    correct = pred == test_y
    per_class = {k: _accuracy(test_y == k, correct) for k in range(c) if np.any(test_y == k)}
    if test_levels is None:
        center = edge = float("nan")
    else:
        lv = np.asarray(test_levels)
        center = _accuracy(lv == 0, correct)
        edge = _accuracy(lv > 0, correct)
    return ProbeReport(float(correct.mean()), per_class, center, edge, center - edge, alpha, scheme, losses)


def _neighbour_order(sims: np.ndarray) -> np.ndarray:
    # descending similarity, ties by lower index
    return np.lexsort((np.arange(sims.size), -sims))


def knn_predict_loo(embeddings, labels, k: int = 5) -> np.ndarray:
    """Leave-one-out cosine kNN predictions.

    Majority vote over the ``k`` most similar other points; a tie between
    labels goes to the tied label whose member ranks nearest.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    if k < 1 or n < k + 1:
        raise ValidationError(f"kNN with k={k} needs at least {k + 1} points, got {n}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = x / np.where(norms > 0, norms, 1.0)
    sims = xn @ xn.T
    preds = np.empty(n, dtype=labels.dtype)
    for i in range(n):
        row = sims[i].copy()
        row[i] = -np.inf
        nbrs = _neighbour_order(row)[:k]
        votes = Counter(labels[nbrs].tolist())
        top = max(votes.values())
        tied = {lab for lab, v in votes.items() if v == top}
        preds[i] = next(labels[j] for j in nbrs if labels[j] in tied)
    return preds


def knn_probe(embeddings, labels, k: int = 5) -> float:
    labels = np.asarray(labels)
    return float(np.mean(knn_predict_loo(embeddings, labels, k) == labels))


@dataclass
class GeometryReport:
    alignment: float
    uniformity: float
    centroid_keys: list[tuple[int, int]]
    centroids: np.ndarray
    centroid_distances: np.ndarray


def geometry_metrics(embeddings, semantic_labels, distortion_levels, t: float = 2.0) -> GeometryReport:
    """Alignment, uniformity and per-(class, level) centroid geometry.

    Alignment is the mean squared distance over same-class pairs; uniformity
    is ``log mean exp(-t |z_i - z_j|^2)`` over all pairs ``i < j``. Both are
    NaN when there are no qualifying pairs.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    sem = np.asarray(semantic_labels)
    lvl = np.asarray(distortion_levels)
    n = z.shape[0]
    if n == 0:
        raise ValidationError("geometry_metrics needs at least one embedding")
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (z @ z.T), 0.0)
    iu = np.triu_indices(n, k=1)
    pair_d2 = d2[iu]
    same = sem[iu[0]] == sem[iu[1]]
    alignment = float(pair_d2[same].mean()) if same.any() else float("nan")
    if pair_d2.size:
        a = -t * pair_d2
        top = a.max()
        uniformity = float(top + np.log(np.mean(np.exp(a - top))))
    else:
        uniformity = float("nan")
    keys = sorted({(int(s), int(l)) for s, l in zip(sem, lvl)})
    cents = np.stack([z[(sem == s) & (lvl == l)].mean(axis=0) for s, l in keys])
    diff = cents[:, None, :] - cents[None, :, :]
    return GeometryReport(alignment, uniformity, keys, cents, np.sqrt(np.sum(diff * diff, axis=2)))


# ---------------------------------------------------------------- end-to-end


def split_indices(n: int, seed: int, test_fraction: float = 0.2):
    """Seeded train/test index split (both sorted)."""
    order = substream(seed, "split").permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def train_test_split(pool: Sequence[LabeledPatch], seed: int, test_fraction: float = 0.2):
    tr, te = split_indices(len(pool), seed, test_fraction)
    return [pool[i] for i in tr], [pool[i] for i in te]


def pool_arrays(pool: Sequence[LabeledPatch]):
    x = np.stack([p.pixels for p in pool]).astype(np.float64)
    sem = np.array([p.semantic_class for p in pool], dtype=np.int64)
    lvl = np.array([p.distortion_level for p in pool], dtype=np.int64)
    return x, sem, lvl


def pool_normalization(pool: Sequence[LabeledPatch], aug: AugmentationConfig = AugmentationConfig()):
    x, _, _ = pool_arrays(pool)
    return aug.with_stats(*pool_channel_stats(x))


def probe_model(model: EncoderModel, train_pool: Sequence[LabeledPatch], test_pool: Sequence[LabeledPatch],
                norm: AugmentationConfig, seed: int = 0, epochs: int = 300, lr: float = 0.5,
                num_classes: Optional[int] = None, alpha=None, scheme=None, with_geometry: bool = True):
    """Linear probe on ``r`` trained on ``train_pool`` and scored on
    ``test_pool``; geometry metrics on the test embeddings ``z``."""
    xtr, ytr, _ = pool_arrays(train_pool)
    xte, yte, lte = pool_arrays(test_pool)
    rtr = encode(model, normalize(xtr, norm))
    xte_n = normalize(xte, norm)
    rte = encode(model, xte_n)
    report = linear_probe(rtr, ytr, rte, yte, epochs=epochs, lr=lr, seed=seed, test_levels=lte,
                          num_classes=num_classes, alpha=alpha, scheme=scheme)
    geom = None
    if with_geometry:
        _, z, _ = forward(model, xte_n)
        geom = geometry_metrics(z, yte, lte)
    return report, geom


def random_init_baseline(train_pool, test_pool, model_cfg: ModelConfig, seed: int = 0, **kw):
    """Probe an untrained encoder initialized from the same seed."""
    return probe_model(init_model(model_cfg, seed), train_pool, test_pool, pool_normalization(train_pool), seed, **kw)


SWEEP_COLUMNS = ("alpha", "probe_accuracy", "center_accuracy", "edge_accuracy", "gap",
                 "alignment", "uniformity", "final_loss", "loss_trace")


@dataclass
class SweepRow:
    alpha: float
    probe: ProbeReport
    geometry: GeometryReport
    epoch_losses: list[float]

    def as_csv_fields(self) -> list[str]:
        return [
            repr(self.alpha),
            f"{self.probe.accuracy:.6f}",
            f"{self.probe.center_accuracy:.6f}",
            f"{self.probe.edge_accuracy:.6f}",
            f"{self.probe.gap:.6f}",
            f"{self.geometry.alignment:.6f}",
            f"{self.geometry.uniformity:.6f}",
            repr(self.epoch_losses[-1]),
            " ".join(repr(v) for v in self.epoch_losses),
        ]


def alpha_sweep(train_pool: Sequence[LabeledPatch], test_pool: Sequence[LabeledPatch], alphas: Sequence[float],
                run_cfg: TrainConfig = TrainConfig(), temperature: float = 0.07,
                model_cfg: Optional[ModelConfig] = None, scheme: Optional[str] = None,
                num_classes: Optional[int] = None, probe_epochs: int = 300, probe_lr: float = 0.5) -> list[SweepRow]:
    """Train and probe one model per alpha with identical seeds and data."""
    cfgs = [LossConfig(temperature, float(a)) for a in alphas]  # validates every alpha up front
    norm_cfg = pool_normalization(train_pool, run_cfg.augmentation)
    rows = []
    for cfg in cfgs:
        res = pretrain(train_pool, model_cfg, cfg, replace(run_cfg, objective="combined"))
        probe, geom = probe_model(res.model, train_pool, test_pool, norm_cfg, run_cfg.seed, probe_epochs, probe_lr,
                                  num_classes=num_classes, alpha=cfg.alpha, scheme=scheme)
        log.info("alpha %.2f: probe accuracy %.4f", cfg.alpha, probe.accuracy)
        rows.append(SweepRow(cfg.alpha, probe, geom, res.epoch_losses))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow(row.as_csv_fields())
    return buf.getvalue()
