"""Evaluation metrics: rank AUC, Top-3 score, summary statistics."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney U statistic with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and sample (n-1) standard deviation; std is None for a single value."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("need at least one value")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, None
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def top3_score(method_a: Sequence[float], method_b: Sequence[float], top: int = 3) -> int:
    """How many of the pooled top-``top`` results belong to ``method_b``.

    Ties are ranked with method A first, so a tie never counts for B.
    """
    if len(method_a) != len(method_b):
        raise ValueError("both methods need the same number of runs")
    pooled = [(-float(v), 0, i) for i, v in enumerate(method_a)]
    pooled += [(-float(v), 1, i) for i, v in enumerate(method_b)]
    pooled.sort()
    return sum(1 for _, who, _ in pooled[:top] if who == 1)
