"""Rank-metric tests: brute-force oracles, invariance properties, CSV I/O."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgscreen.errors import DegenerateLabels, ShapeMismatch
from ecgscreen.icd import LabelKind, LabelVocabulary, parse_code
from ecgscreen.metrics import (
    LabelMetrics,
    auprc,
    auroc,
    evaluate_labels,
    read_metrics_csv,
    write_metrics_csv,
)


def auroc_pairwise_oracle(scores, labels):
    """O(n^2) definition: mean over (pos, neg) pairs of win + half-tie."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def auprc_naive_oracle(scores, labels):
    """Mean precision at each positive's rank, ties grouped, in rationals."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    total = Fraction(0)
    tp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        group_pos = int(y_sorted[i:j].sum())
        if group_pos:
            tp += group_pos
            total += Fraction(tp * group_pos, j)
        i = j
    return float(total / int(labels.sum()))


def _random_instance(rng, n_max=200, tie_prob=0.6):
    n = int(rng.integers(2, n_max + 1))
    labels = np.zeros(n, dtype=np.int64)
    n_pos = int(rng.integers(1, n))
    labels[rng.permutation(n)[:n_pos]] = 1
    if rng.random() < tie_prob:
        scores = rng.integers(0, max(2, n // 4), size=n).astype(np.float64)
    else:
        scores = rng.standard_normal(n)
    return scores, labels


class TestAurocOracle:
    def test_matches_pairwise_oracle_on_300_instances(self, rng):
        for _ in range(300):
            scores, labels = _random_instance(rng)
            fast = auroc(scores, labels)
            slow = auroc_pairwise_oracle(scores, labels)
            assert abs(fast - slow) < 1e-12

    def test_known_values(self):
        assert auroc([0.1, 0.9], [0, 1]) == 1.0
        assert auroc([0.9, 0.1], [0, 1]) == 0.0
        assert auroc([0.5, 0.5], [0, 1]) == 0.5
        assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
        assert auroc([1, 2, 3, 4], [0, 1, 0, 1]) == 0.75

    def test_all_tied_scores_give_half(self, rng):
        labels = (rng.random(50) < 0.3).astype(int)
        labels[0], labels[1] = 0, 1
        assert auroc(np.zeros(50), labels) == 0.5


class TestAuprcOracle:
    def test_matches_naive_oracle_exactly_on_300_instances(self, rng):
        for _ in range(300):
            scores, labels = _random_instance(rng)
            assert auprc(scores, labels) == auprc_naive_oracle(scores, labels)

    def test_known_values(self):
        assert auprc([0.9, 0.1], [1, 0]) == 1.0
        assert auprc([0.1, 0.9], [1, 0]) == 0.5
        # positives at ranks 1 and 3: (1/1 + 2/3) / 2
        assert abs(auprc([4, 3, 2, 1], [1, 0, 1, 0]) - (1 + 2 / 3) / 2) < 1e-15

    def test_perfect_ranking_gives_one(self, rng):
        labels = np.array([1] * 5 + [0] * 20)
        scores = np.concatenate([rng.random(5) + 2, rng.random(20)])
        assert auprc(scores, labels) == 1.0

    def test_all_tied_equals_prevalence(self):
        labels = np.array([1, 0, 0, 1, 0])
        assert auprc(np.ones(5), labels) == pytest.approx(0.4, abs=1e-15)

    def test_random_scores_approach_prevalence(self):
        rng = np.random.default_rng(77)
        n = 10_000
        labels = (rng.random(n) < 0.07).astype(int)
        scores = rng.standard_normal(n)
        assert abs(auprc(scores, labels) - labels.mean()) < 0.05


class TestValidation:
    def test_degenerate_columns_rejected(self):
        with pytest.raises(DegenerateLabels):
            auroc([1.0, 2.0], [1, 1])
        with pytest.raises(DegenerateLabels):
            auroc([1.0, 2.0], [0, 0])
        with pytest.raises(DegenerateLabels):
            auprc([1.0, 2.0], [0, 0])

    def test_shape_and_value_validation(self):
        with pytest.raises(ShapeMismatch):
            auroc([1.0], [1, 0])
        with pytest.raises(ShapeMismatch):
            auroc([1.0, 2.0], [1, 2])
        with pytest.raises(ShapeMismatch):
            auroc([1.0, np.nan], [1, 0])


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_strictly_monotone_transform_preserves_both_metrics(self, data):
        n = data.draw(st.integers(3, 60))
        labels = np.array(
            data.draw(
                st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(
                    lambda ls: 0 < sum(ls) < len(ls)
                )
            )
        )
        scores = np.array(
            data.draw(st.lists(st.integers(-20, 20), min_size=n, max_size=n)),
            dtype=np.float64,
        )
        transformed = 3.0 * scores + 7.0  # strictly increasing, tie-preserving
        assert auroc(scores, labels) == pytest.approx(
            auroc(transformed, labels), abs=1e-14
        )
        assert auprc(scores, labels) == auprc(transformed, labels)

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_score_negation_complements_auroc(self, data):
        n = data.draw(st.integers(3, 60))
        labels = np.array(
            data.draw(
                st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(
                    lambda ls: 0 < sum(ls) < len(ls)
                )
            )
        )
        scores = np.array(
            data.draw(st.lists(st.integers(-10, 10), min_size=n, max_size=n)),
            dtype=np.float64,
        )
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(
            1.0, abs=1e-12
        )

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_row_order_permutation_invariant(self, data):
        n = data.draw(st.integers(3, 50))
        labels = np.array(
            data.draw(
                st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(
                    lambda ls: 0 < sum(ls) < len(ls)
                )
            )
        )
        scores = np.array(
            data.draw(st.lists(st.integers(0, 6), min_size=n, max_size=n)),
            dtype=np.float64,
        )
        seed = data.draw(st.integers(0, 2**16))
        perm = np.random.default_rng(seed).permutation(n)
        assert auroc(scores, labels) == pytest.approx(
            auroc(scores[perm], labels[perm]), abs=1e-14
        )
        assert auprc(scores, labels) == auprc(scores[perm], labels[perm])

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_auroc_bounds(self, data):
        n = data.draw(st.integers(2, 40))
        labels = np.array(
            data.draw(
                st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(
                    lambda ls: 0 < sum(ls) < len(ls)
                )
            )
        )
        scores = np.array(
            data.draw(st.lists(st.integers(-5, 5), min_size=n, max_size=n)),
            dtype=np.float64,
        )
        assert 0.0 <= auroc(scores, labels) <= 1.0
        assert 0.0 < auprc(scores, labels) <= 1.0


def _vocab(texts):
    return LabelVocabulary(
        kind=LabelKind.FULL_CODE,
        entries=tuple((parse_code(t), 5) for t in sorted(texts)),
        min_support=1,
    )


class TestEvaluateLabels:
    def test_per_column_metrics_and_degenerates(self, rng):
        vocab = _vocab(["A00", "B00", "C00"])
        n = 40
        labels = np.zeros((n, 3), dtype=np.uint8)
        labels[:10, 0] = 1
        labels[:, 1] = 1          # all positive: degenerate
        probs = rng.random((n, 3))
        probs[:10, 0] += 1.0      # separable first column
        results = evaluate_labels(probs, labels, vocab)
        by_label = {m.label.text: m for m in results}
        assert by_label["A00"].auroc == 1.0 and by_label["A00"].auprc == 1.0
        assert by_label["B00"].degenerate and by_label["B00"].n_pos == n
        assert by_label["C00"].degenerate and by_label["C00"].n_pos == 0
        assert by_label["C00"].prevalence == 0.0

    def test_thread_count_does_not_change_results(self, rng):
        vocab = _vocab(["A00", "B00", "C00", "D00"])
        labels = (rng.random((60, 4)) < 0.3).astype(np.uint8)
        probs = rng.random((60, 4))
        single = evaluate_labels(probs, labels, vocab, threads=1)
        multi = evaluate_labels(probs, labels, vocab, threads=4)
        assert single == multi

    def test_width_mismatch_raises(self, rng):
        vocab = _vocab(["A00", "B00"])
        with pytest.raises(ShapeMismatch):
            evaluate_labels(rng.random((5, 3)), np.zeros((5, 3), dtype=np.uint8), vocab)


class TestMetricsCsv:
    def test_round_trip_preserves_float_bits(self, tmp_path, rng):
        vocab = _vocab(["A00", "B00", "C00"])
        labels = (rng.random((50, 3)) < 0.4).astype(np.uint8)
        labels[:, 2] = 0
        probs = rng.random((50, 3))
        results = evaluate_labels(probs, labels, vocab)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(results, path, config_digest="deadbeef")
        loaded = read_metrics_csv(path)
        assert loaded == results
        assert path.read_text().startswith("# config_digest=deadbeef\n")

    def test_header_schema(self, tmp_path, rng):
        vocab = _vocab(["A00"])
        labels = np.array([[1], [0], [1]], dtype=np.uint8)
        results = evaluate_labels(np.array([[0.9], [0.2], [0.8]]), labels, vocab)
        path = tmp_path / "m.csv"
        write_metrics_csv(results, path)
        header = path.read_text().splitlines()[0]
        assert header == "label,kind,n_eval,n_pos,prevalence,auroc,auprc"
