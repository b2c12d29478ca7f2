"""Evaluation metrics against brute-force rank-enumeration oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melformer.errors import DataError, ShapeError
from melformer.metrics import (
    accuracy,
    average_precision,
    evaluate_scores,
    mean_average_precision,
)


def ap_reference(scores, targets):
    """O(n^2) oracle: explicit rank of each positive under stable descending sort."""
    n = len(scores)
    total = 0.0
    num_pos = 0
    for i in range(n):
        if not targets[i]:
            continue
        num_pos += 1
        # Rank of i: examples with higher score, plus earlier-index ties.
        rank = 1
        hits = 1
        for j in range(n):
            if j == i:
                continue
            ahead = scores[j] > scores[i] or (scores[j] == scores[i] and j < i)
            if ahead:
                rank += 1
                if targets[j]:
                    hits += 1
        total += hits / rank
    return total / num_pos


class TestAveragePrecision:
    def test_positives_ranked_first_and_third(self):
        ap = average_precision([0.9, 0.5, 0.4], [1, 0, 1])
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_perfect_ranking_is_one(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_single_positive_ranked_last(self):
        n = 6
        scores = np.linspace(1.0, 0.0, n)
        targets = np.zeros(n)
        targets[-1] = 1
        assert average_precision(scores, targets) == pytest.approx(1.0 / n)

    def test_no_positives_signaled_as_nan(self):
        assert np.isnan(average_precision([0.3, 0.2], [0, 0]))

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=30)
        targets = rng.integers(0, 2, size=30)
        targets[0] = 1
        base = average_precision(scores, targets)
        for transform in (np.exp, np.tanh, lambda s: 3.0 * s + 7.0):
            assert average_precision(transform(scores), targets) == pytest.approx(base)

    def test_permutation_invariance_for_distinct_scores(self):
        rng = np.random.default_rng(1)
        scores = rng.permutation(np.linspace(0, 1, 25))
        targets = rng.integers(0, 2, size=25)
        targets[3] = 1
        base = average_precision(scores, targets)
        perm = rng.permutation(25)
        assert average_precision(scores[perm], targets[perm]) == pytest.approx(base)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 25))
        # Quantized scores force ties through the stable tie-break path.
        scores = np.round(rng.random(n), 1)
        targets = rng.integers(0, 2, size=n)
        if targets.sum() == 0:
            targets[int(rng.integers(0, n))] = 1
        assert average_precision(scores, targets) == pytest.approx(
            ap_reference(scores, targets), abs=1e-12
        )


class TestMeanAveragePrecision:
    def test_mean_of_class_aps(self):
        scores = np.array([[0.9, 0.1], [0.8, 0.9], [0.1, 0.2]])
        targets = np.array([[1, 0], [1, 1], [0, 0]])
        m, per_class = mean_average_precision(scores, targets)
        assert m == pytest.approx((per_class[0] + per_class[1]) / 2.0)

    def test_identical_scores_give_prevalence(self):
        """All-equal predictions rank by index; AP equals positive prevalence
        in expectation only for random label placement, but for every-kth
        labels the tie-handling oracle pins the exact value."""
        n = 20
        scores = np.full((n, 1), 0.5)
        targets = np.zeros((n, 1))
        targets[::4] = 1
        m, _ = mean_average_precision(scores, targets)
        assert m == pytest.approx(ap_reference(scores[:, 0], targets[:, 0]))

    def test_oracle_parity_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            scores = np.round(rng.random((20, 5)), 2)
            targets = rng.integers(0, 2, size=(20, 5))
            targets[rng.integers(0, 20), :] = 1
            m, per_class = mean_average_precision(scores, targets)
            expected = np.mean(
                [ap_reference(scores[:, c], targets[:, c]) for c in range(5)]
            )
            assert abs(m - expected) < 1e-9

    def test_all_empty_classes_rejected(self):
        with pytest.raises(DataError):
            mean_average_precision(np.ones((3, 2)), np.zeros((3, 2)))

    def test_oracle_predictor_scores_one(self):
        rng = np.random.default_rng(3)
        targets = rng.integers(0, 2, size=(30, 4))
        targets[0] = 1
        m, _ = mean_average_precision(targets.astype(float), targets)
        assert m == 1.0


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_none_correct(self):
        assert accuracy([1, 2], [2, 1]) == 0.0

    def test_three_of_four(self):
        assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            accuracy([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            accuracy([1], [1, 2])


class TestEvalReport:
    def test_single_label_data_gets_accuracy(self):
        targets = np.eye(4)[[0, 1, 2, 3, 0, 1]]
        scores = targets + 0.01 * np.random.default_rng(4).random((6, 4))
        report = evaluate_scores(scores, targets)
        assert report.accuracy == 1.0
        assert report.map_score == 1.0
        assert report.num_examples == 6

    def test_multi_label_data_has_no_accuracy(self):
        targets = np.array([[1, 1], [0, 1]])
        report = evaluate_scores(np.array([[0.9, 0.8], [0.1, 0.7]]), targets)
        assert report.accuracy is None
        assert 0.0 <= report.map_score <= 1.0
