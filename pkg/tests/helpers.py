"""Oracles and drivers shared by several test modules."""

import math
from collections import Counter

import numpy as np

from fisheye_supcon.cli import run


def brute_knn(x, labels, k):
    """Quadratic loop: sort every other point by (-cosine, index)."""
    n = len(x)
    unit = [v / math.sqrt(sum(c * c for c in v)) for v in x]
    preds = []
    for i in range(n):
        ranked = sorted((j for j in range(n) if j != i),
                        key=lambda j: (-float(np.dot(unit[i], unit[j])), j))[:k]
        votes = Counter(labels[j] for j in ranked)
        best = max(votes.values())
        preds.append(next(labels[j] for j in ranked if votes[labels[j]] == best))
    return np.array(preds)


FAST_TRAIN = ["--epochs", "1", "--batch-size", "16", "--representation-dim", "16"]


def pipeline(root):
    """Run every subcommand once under ``root``; return produced files."""
    root.mkdir()
    g = root / "gen"
    steps = [
        ["gen", "--out", str(g), "--num-images", "8", "--image-size", "48", "--seed", "3"],
        ["extract", "--manifest", str(g / "manifest.json"), "--out", str(root / "pool.fepp")],
        ["stats", "--manifest", str(g / "manifest.json"), "--pool", str(g / "pool.fepp"), "--out", str(root / "stats")],
        ["pretrain", "--pool", str(g / "pool.fepp"), "--out", str(root / "m.feck"),
         "--loss-csv", str(root / "loss.csv"), *FAST_TRAIN],
        ["probe", "--pool", str(g / "pool.fepp"), "--checkpoint", str(root / "m.feck"), "--baseline",
         "--probe-epochs", "20", "--out", str(root / "probe.csv")],
        ["sweep", "--pool", str(g / "pool.fepp"), "--alphas", "0,1", "--probe-epochs", "20",
         "--out", str(root / "sweep.csv"), *FAST_TRAIN],
        ["distortion-curve", "--samples", "11", "--out", str(root / "curve.csv")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    return sorted(p for p in root.rglob("*") if p.is_file())
