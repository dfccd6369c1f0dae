"""Shared test fixtures and independent oracles.

The oracles here deliberately avoid the library's own code paths: auroc
by brute-force pair counting, auprc by per-positive rank enumeration,
convolution by direct index expansion.
"""

from __future__ import annotations

import numpy as np
import pytest

from statenet.data import Montage, SynthConfig, builtin_montage, synth_cohort


def auroc_oracle(scores, labels) -> float:
    """O(n^2) pair counting: wins + half-ties over all pos/neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def auprc_oracle(scores, labels) -> float:
    """Ranked enumeration: precision at each positive's rank, tie-aware.

    Walks positives in descending score order; at a positive with score s,
    precision counts everything scored >= s (the whole tie group admitted).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos_scores = np.sort(scores[labels == 1])[::-1]
    total = 0.0
    for s in pos_scores:
        admitted = scores >= s
        total += labels[admitted].sum() / admitted.sum()
    return float(total / pos_scores.size)


def conv_oracle(x, w, dilation: int, bias: float = 0.0) -> np.ndarray:
    """Direct expansion of y[t] = bias + sum_j w[j] * x[t-(k-1-j)*d]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    k = w.size
    y = np.full(x.size, bias, dtype=np.float64)
    for t in range(x.size):
        for j in range(k):
            src = t - (k - 1 - j) * dilation
            if src >= 0:
                y[t] += w[j] * x[src]
    return y


TINY_MONTAGE = Montage("tiny3", ("C3-P3", "C4-P4", "P3-P4"))


def tiny_synth_config(**overrides) -> SynthConfig:
    """A fast cohort for unit tests: 4 neonates x 5 minutes, 3 channels."""
    base = dict(
        n_neonates=4, seed=11, montage=TINY_MONTAGE, minutes_per_neonate=5.0,
        seizure_rate_per_hour=24.0, event_duration_range_s=(35.0, 60.0),
    )
    base.update(overrides)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def tiny_cohort():
    return synth_cohort(tiny_synth_config())


@pytest.fixture(scope="session")
def montage18():
    return builtin_montage(18)


@pytest.fixture(scope="session")
def montage3():
    return builtin_montage(3)
