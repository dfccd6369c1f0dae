import numpy as np
import pytest
from conftest import auprc_oracle, auroc_oracle

from statenet.errors import UndefinedMetricError
from statenet.metrics import auprc, auroc


class TestAuroc:
    def test_worked_example(self):
        # expected value computed by the pair-counting oracle
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        assert auroc_oracle(scores, labels) == 0.75
        assert auroc(scores, labels) == 0.75

    def test_perfect_separation(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_single_class_raises(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.9], [1, 1])
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.9], [0, 0])

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            n = int(rng.integers(2, 200))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.random(n)
            assert auroc(scores, labels) == auroc_oracle(scores, labels)

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(4, 120))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.integers(0, 5, size=n) / 4.0  # heavy ties
            assert auroc(scores, labels) == auroc_oracle(scores, labels)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        scores = rng.random(60)
        labels = rng.integers(0, 2, size=60)
        labels[0], labels[1] = 0, 1
        base = auroc(scores, labels)
        for transform in (lambda s: 3 * s + 2, np.exp, lambda s: s ** 3):
            assert auroc(transform(scores), labels) == pytest.approx(base, abs=0)


class TestAuprc:
    def test_worked_example(self):
        # ranked list: 0.8(+) p=1, 0.4(-), 0.35(+) p=2/3, 0.1(-) -> AP = 5/6
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        assert auprc_oracle(scores, labels) == pytest.approx(5 / 6, abs=1e-15)
        assert auprc(scores, labels) == pytest.approx(5 / 6, abs=1e-15)

    def test_single_positive_on_top(self):
        assert auprc([0.2, 0.5, 0.9], [0, 0, 1]) == 1.0

    def test_all_positive(self):
        assert auprc([0.3, 0.9, 0.1], [1, 1, 1]) == 1.0

    def test_no_positive_raises(self):
        with pytest.raises(UndefinedMetricError):
            auprc([0.4, 0.6], [0, 0])

    def test_matches_oracle_distinct(self):
        rng = np.random.default_rng(123)
        for _ in range(300):
            n = int(rng.integers(2, 200))
            labels = rng.integers(0, 2, size=n)
            if labels.max() == 0:
                labels[0] = 1
            scores = rng.permutation(n) / n  # distinct
            assert auprc(scores, labels) == auprc_oracle(scores, labels)

    def test_matches_oracle_ties(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(3, 120))
            labels = rng.integers(0, 2, size=n)
            if labels.max() == 0:
                labels[0] = 1
            scores = rng.integers(0, 6, size=n) / 5.0
            assert auprc(scores, labels) == pytest.approx(
                auprc_oracle(scores, labels), abs=1e-9)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1])
    with pytest.raises(ValueError):
        auprc([0.1], [1, 0])


def test_non_binary_labels_rejected():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2, 0.3], [0, 1, 2])
