import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppc import metrics as mt
from ppc.errors import DataError

# published benchmark columns: counts and the derived rows to 3 decimals
SINE_COUNTS = mt.ConfusionCounts(tp=95910, fp=685, tn=99315, fn=4090)
SINE_EXPECTED = {"recall": 0.959, "precision": 0.993, "specificity": 0.993,
                 "balanced_accuracy": 0.976, "mcc": 0.953, "f1": 0.976}
MNIST_COUNTS = mt.ConfusionCounts(tp=88347875, fp=3925349, tn=6080573, fn=1646203)
MNIST_EXPECTED = {"recall": 0.982, "precision": 0.957, "specificity": 0.608,
                  "balanced_accuracy": 0.795, "mcc": 0.662, "f1": 0.969}


def pairwise_auc(scores, labels):
    """Brute-force AUC: P(pos score < neg score), ties credited 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = sum((p < n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestConfusion:
    def test_no_positives_when_all_scores_one(self):
        c = mt.confusion([1.0, 1.0, 1.0], [True, False, True], alpha=0.5)
        assert (c.tp, c.fp) == (0, 0) and c.total == 3

    def test_alpha_one_flags_everything_below_one(self):
        labels = np.array([True, False, True, False])
        c = mt.confusion([0.1, 0.2, 0.3, 0.4], labels, alpha=1.0)
        assert c.tp + c.fp == 4

    def test_counts_exact(self):
        c = mt.confusion([0.01, 0.2, 0.04, 0.9], [True, True, False, False], alpha=0.05)
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)

    def test_recall_from_published_counts(self):
        assert SINE_COUNTS.tp / (SINE_COUNTS.tp + SINE_COUNTS.fn) == pytest.approx(
            0.959, abs=5e-4
        )

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            mt.confusion([], [], 0.5)

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            mt.confusion([0.5], [True, False], 0.5)


class TestMetricsSuite:
    @pytest.mark.parametrize("counts,expected",
                             [(SINE_COUNTS, SINE_EXPECTED), (MNIST_COUNTS, MNIST_EXPECTED)])
    def test_published_benchmark_columns(self, counts, expected):
        suite = mt.metrics_suite(counts)
        for key, want in expected.items():
            assert suite[key] == pytest.approx(want, abs=5e-4), key

    def test_perfect_classifier(self):
        suite = mt.metrics_suite(mt.ConfusionCounts(tp=10, fp=0, tn=10, fn=0))
        assert all(v == 1.0 for v in suite.values())

    def test_all_negative_predictions(self):
        suite = mt.metrics_suite(mt.ConfusionCounts(tp=0, fp=0, tn=5, fn=5))
        assert suite["recall"] == 0.0
        assert suite["specificity"] == 1.0
        assert suite["precision"] is None  # no positive predictions
        assert suite["mcc"] is None

    def test_degenerate_all_zero(self):
        suite = mt.metrics_suite(mt.ConfusionCounts(tp=0, fp=0, tn=0, fn=0))
        assert all(v is None for v in suite.values())

    def test_mcc_formula_oracle(self):
        c = mt.ConfusionCounts(tp=3, fp=1, tn=4, fn=2)
        want = (3 * 4 - 1 * 2) / math.sqrt(4 * 5 * 5 * 6)
        assert mt.metrics_suite(c)["mcc"] == pytest.approx(want, rel=1e-12)


class TestRocAuc:
    def test_perfect_separation(self):
        scores = [0.01, 0.02, 0.8, 0.9]
        labels = [True, True, False, False]
        assert mt.roc_auc(scores, labels) == 1.0

    def test_reversed_separation(self):
        assert mt.roc_auc([0.9, 0.8, 0.1], [True, True, False]) == 0.0

    def test_small_case_hand_computed(self):
        scores = [0.1, 0.2, 0.3, 0.4]
        labels = [True, False, True, False]
        assert mt.roc_auc(scores, labels) == pytest.approx(0.75)

    def test_matches_pairwise_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            n = int(rng.integers(6, 200))
            scores = rng.choice(np.linspace(0, 1, 17), size=n)  # heavy ties
            labels = rng.random(n) < 0.4
            if labels.all() or not labels.any():
                continue
            assert mt.roc_auc(scores, labels) == pytest.approx(
                pairwise_auc(scores, labels), abs=1e-12
            )

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(1)
        n = 4000
        scores = rng.random(n)
        labels = rng.random(n) < 0.5
        n_pos = labels.sum()
        n_neg = n - n_pos
        se = math.sqrt((n + 1) / (12 * n_pos * n_neg))
        assert abs(mt.roc_auc(scores, labels) - 0.5) < 3 * se

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            mt.roc_auc([0.1, 0.2], [True, True])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_pairwise_oracle_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 60))
        scores = np.round(rng.random(n), 2)
        labels = np.zeros(n, dtype=bool)
        labels[: max(1, n // 3)] = True
        rng.shuffle(labels)
        assert mt.roc_auc(scores, labels) == pytest.approx(
            pairwise_auc(scores, labels), abs=1e-12
        )


class TestPrAuc:
    def test_perfect_separation(self):
        assert mt.pr_auc([0.01, 0.02, 0.8, 0.9], [True, True, False, False]) == 1.0

    def test_small_case_hand_computed(self):
        # recall steps: 0.5 at precision 1, then 1.0 at precision 2/3
        scores = [0.1, 0.2, 0.3, 0.4]
        labels = [True, False, True, False]
        assert mt.pr_auc(scores, labels) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_bounded_by_one(self):
        rng = np.random.default_rng(2)
        scores = rng.random(100)
        labels = rng.random(100) < 0.3
        assert 0.0 < mt.pr_auc(scores, labels) <= 1.0

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            mt.pr_auc([0.1, 0.2], [False, False])


class TestSelectThreshold:
    def test_separable_flags_exactly_positives(self):
        scores = np.array([0.01, 0.03, 0.6, 0.7])
        labels = np.array([True, True, False, False])
        alpha = mt.select_threshold_max_f1(scores, labels)
        c = mt.confusion(scores, labels, alpha)
        assert (c.tp, c.fp, c.fn) == (2, 0, 0)

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(5, 120))
            scores = np.round(rng.random(n), 2)
            labels = rng.random(n) < 0.5
            if labels.all() or not labels.any():
                continue
            alpha = mt.select_threshold_max_f1(scores, labels)
            got = mt.metrics_suite(mt.confusion(scores, labels, alpha))["f1"]
            # exhaustive sweep over a superset of candidate cuts
            grid = np.concatenate([np.unique(scores), [2.0], np.unique(scores) + 1e-9])
            best = max(
                (mt.metrics_suite(mt.confusion(scores, labels, a))["f1"] or 0.0)
                for a in grid
            )
            assert got == pytest.approx(best, abs=1e-12)

    def test_never_beaten_by_any_candidate(self):
        rng = np.random.default_rng(4)
        scores = np.round(rng.random(500), 3)
        labels = rng.random(500) < 0.4
        alpha = mt.select_threshold_max_f1(scores, labels)
        got = mt.metrics_suite(mt.confusion(scores, labels, alpha))["f1"]
        for a in np.unique(scores):
            f1 = mt.metrics_suite(mt.confusion(scores, labels, float(a)))["f1"] or 0.0
            assert got >= f1 - 1e-12

    def test_ties_break_toward_smaller_alpha(self):
        # both cuts flag the single positive perfectly; smaller alpha wins
        scores = np.array([0.1, 0.5, 0.6])
        labels = np.array([True, False, False])
        assert mt.select_threshold_max_f1(scores, labels) == 0.5

    def test_all_equal_scores_picks_flag_all_if_better(self):
        scores = np.full(4, 0.3)
        labels = np.array([True, True, True, False])
        alpha = mt.select_threshold_max_f1(scores, labels)
        c = mt.confusion(scores, labels, alpha)
        assert c.tp == 3  # flag-everything branch has F1 6/7 > 0


class TestFitGaussian:
    def test_discretized_normal_recovered(self):
        xs = np.arange(-16.0, 28.0 + 1e-9, 0.05)
        pdf = np.exp(-0.5 * (xs / 2.0) ** 2) / (2.0 * math.sqrt(2 * math.pi))
        mu, sigma = mt.fit_gaussian(xs, pdf)
        assert abs(mu - 0.0) < 1e-3
        assert abs(sigma - 2.0) < 1e-3

    def test_translation_equivariance(self):
        xs = np.linspace(-5, 5, 201)
        pdf = np.exp(-0.5 * xs**2)
        mu0, s0 = mt.fit_gaussian(xs, pdf)
        mu1, s1 = mt.fit_gaussian(xs + 3.25, pdf)
        assert mu1 == pytest.approx(mu0 + 3.25, abs=1e-12)
        assert s1 == pytest.approx(s0, abs=1e-12)

    def test_zero_mass_rejected(self):
        with pytest.raises(DataError, match="mass"):
            mt.fit_gaussian(np.linspace(0, 1, 11), np.zeros(11))

    def test_negative_density_rejected(self):
        with pytest.raises(DataError, match="negative"):
            mt.fit_gaussian(np.linspace(0, 1, 11), -np.ones(11))

    def test_nonuniform_grid_rejected(self):
        with pytest.raises(DataError, match="uniform"):
            mt.fit_gaussian([0.0, 0.1, 0.5], [1.0, 1.0, 1.0])


class TestKsUniformity:
    def test_exact_uniform_grid(self):
        n = 100
        ps = (np.arange(1, n + 1) - 0.5) / n
        assert mt.ks_uniformity(ps) <= 1.0 / n

    def test_point_mass_at_half(self):
        assert mt.ks_uniformity(np.full(200, 0.5)) == pytest.approx(0.5)

    def test_uniform_samples_below_critical_value(self):
        rng = np.random.default_rng(5)
        n = 10**4
        assert mt.ks_uniformity(rng.random(n)) < 1.63 / math.sqrt(n)

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            mt.ks_uniformity([0.5, 1.5])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            mt.ks_uniformity([])


class TestExports:
    def test_metrics_json_fields(self):
        import json

        text = mt.metrics_to_json(SINE_COUNTS, roc=0.989, pr=0.992, alpha=0.01)
        payload = json.loads(text)
        assert payload["tp"] == 95910 and payload["roc_auc"] == 0.989
        assert payload["f1"] == pytest.approx(0.976, abs=5e-4)

    def test_curve_csv_shape(self):
        pts = mt.roc_curve([0.1, 0.9], [True, False])
        text = mt.curve_to_csv(pts, "fpr", "tpr")
        lines = text.strip().split("\n")
        assert lines[0] == "threshold,fpr,tpr"
        assert len(lines) == len(pts) + 1
