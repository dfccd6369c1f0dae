"""Ranking metrics for window-level seizure scores.

auroc uses the rank (Mann-Whitney) formulation with ties counted as 1/2;
auprc is average precision with tie groups admitted together. Both raise
UndefinedMetricError instead of guessing when the labels are single-class.
"""

from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if s.size == 0:
        raise ValueError("empty score vector")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    uniq = set(np.unique(y).tolist())
    if not uniq <= {0, 1}:
        raise ValueError(f"labels must be binary, got values {sorted(uniq)}")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties 1/2."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"auroc undefined: {n_pos} positive / {n_neg} negative labels")
    # average ranks (1-based) with ties sharing their group mean
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank_per_group = ends - (counts - 1) / 2.0
    ranks = avg_rank_per_group[inverse]
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over the descending score ranking, tie-aware."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("auprc undefined: no positive labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    total = 0.0
    tp = 0
    seen = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        group_tp = int(y_sorted[i:j + 1].sum())
        tp += group_tp
        seen += j + 1 - i
        if group_tp:
            total += group_tp * (tp / seen)
        i = j + 1
    return float(total / n_pos)
