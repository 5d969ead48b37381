"""Metric examples plus brute-force oracles and merge associativity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossband.metrics import (
    ConfusionAccumulator,
    MetricUndefinedError,
    accuracy,
    biou_minority,
    f1_binary,
    f1_multilabel,
    miou,
    multilabel_accumulators,
    score,
)


# ---------------------------------------------------------------------------
# brute-force oracles computed directly from raw label arrays
# ---------------------------------------------------------------------------


def brute_accuracy(gt, pred):
    gt, pred = np.asarray(gt), np.asarray(pred)
    return float((gt == pred).sum()) / gt.size


def brute_f1(gt, pred, positive=1):
    gt, pred = np.asarray(gt), np.asarray(pred)
    tp = int(((gt == positive) & (pred == positive)).sum())
    fp = int(((gt != positive) & (pred == positive)).sum())
    fn = int(((gt == positive) & (pred != positive)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def brute_miou(gt, pred, k):
    gt, pred = np.asarray(gt), np.asarray(pred)
    ious = []
    for c in range(k):
        inter = int(((gt == c) & (pred == c)).sum())
        union = int(((gt == c) | (pred == c)).sum())
        if union:
            ious.append(inter / union)
    if not ious:
        raise MetricUndefinedError("no class present")
    return float(np.mean(ious))


def brute_biou(gt, pred):
    gt, pred = np.asarray(gt), np.asarray(pred)
    minority = 1 if (gt == 1).sum() <= (gt == 0).sum() else 0
    inter = int(((gt == minority) & (pred == minority)).sum())
    union = int(((gt == minority) | (pred == minority)).sum())
    if union == 0:
        raise MetricUndefinedError("minority absent")
    return inter / union


def acc_from(gt, pred, k):
    return ConfusionAccumulator(k).update(gt, pred)


class TestAccuracy:
    def test_perfect(self):
        assert accuracy(acc_from([0, 1, 2], [0, 1, 2], 3)) == 1.0

    def test_all_wrong(self):
        assert accuracy(acc_from([0, 1], [1, 0], 2)) == 0.0

    def test_three_quarters(self):
        assert accuracy(acc_from([0, 0, 1, 1], [0, 1, 1, 1], 2)) == 0.75

    def test_empty_undefined(self):
        with pytest.raises(MetricUndefinedError):
            accuracy(ConfusionAccumulator(3))


class TestF1Binary:
    def test_perfect(self):
        assert f1_binary(acc_from([0, 1], [0, 1], 2)) == 1.0

    def test_degenerate_zero_by_convention(self):
        assert f1_binary(acc_from([0, 0], [0, 0], 2)) == 0.0

    def test_two_thirds(self):
        # TP=2, FP=1, FN=1 -> 2*2 / (4+1+1)
        gt = [1, 1, 1, 0, 0]
        pred = [1, 1, 0, 1, 0]
        assert f1_binary(acc_from(gt, pred, 2)) == pytest.approx(2 / 3)


class TestF1Multilabel:
    def test_all_perfect(self):
        gt = np.array([[1, 0], [0, 1]])
        assert f1_multilabel(multilabel_accumulators(gt, gt)) == 1.0

    def test_macro_average_of_one_and_zero(self):
        gt = np.array([[1, 1], [1, 1]])
        pred = np.array([[1, 0], [1, 0]])
        assert f1_multilabel(multilabel_accumulators(gt, pred)) == 0.5

    def test_matches_per_label_brute_force(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(0, 2, size=(50, 6))
        pred = rng.integers(0, 2, size=(50, 6))
        got = f1_multilabel(multilabel_accumulators(gt, pred))
        expected = np.mean([brute_f1(gt[:, j], pred[:, j]) for j in range(6)])
        assert got == pytest.approx(expected)


class TestMiou:
    def test_perfect(self):
        assert miou(acc_from([0, 1, 2], [0, 1, 2], 3)) == 1.0

    def test_confusion_oracle_case(self):
        # class 0: inter 1, union 2; class 1: inter 2, union 3
        got = miou(acc_from([0, 0, 1, 1], [0, 1, 1, 1], 2))
        assert got == pytest.approx((1 / 2 + 2 / 3) / 2)

    def test_disjoint_masks(self):
        assert miou(acc_from([0, 0], [1, 1], 2)) == 0.0

    def test_absent_class_excluded(self):
        # class 2 never appears and must not dilute the mean
        got = miou(acc_from([0, 1], [0, 1], 3))
        assert got == 1.0


class TestBiouMinority:
    def test_perfect(self):
        assert biou_minority(acc_from([0, 0, 1], [0, 0, 1], 2)) == 1.0

    def test_set_arithmetic_third(self):
        # GT minority {a, b}, predicted {b, c} -> |{b}| / |{a, b, c}|
        gt = [1, 1, 0, 0, 0]
        pred = [0, 1, 1, 0, 0]
        assert biou_minority(acc_from(gt, pred, 2)) == pytest.approx(1 / 3)

    def test_majority_perfect_minority_missed_scores_zero(self):
        gt = [0] * 9 + [1]
        pred = [0] * 10
        assert biou_minority(acc_from(gt, pred, 2)) == 0.0

    def test_tie_prefers_class_one(self):
        gt = [0, 1]
        pred = [0, 0]
        # minority = class 1 on ties; IoU(1) = 0
        assert biou_minority(acc_from(gt, pred, 2)) == 0.0


class TestRandomizedOracles:
    """1000 random instances per metric must match brute force exactly."""

    N_CASES = 1000

    def test_accuracy_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(self.N_CASES):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(1, 40))
            gt = rng.integers(0, k, n)
            pred = rng.integers(0, k, n)
            assert accuracy(acc_from(gt, pred, k)) == brute_accuracy(gt, pred)

    def test_f1_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(self.N_CASES):
            n = int(rng.integers(1, 40))
            gt = rng.integers(0, 2, n)
            pred = rng.integers(0, 2, n)
            assert f1_binary(acc_from(gt, pred, 2)) == brute_f1(gt, pred)

    def test_f1_multilabel_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(self.N_CASES):
            n, labels = int(rng.integers(1, 20)), int(rng.integers(1, 6))
            gt = rng.integers(0, 2, (n, labels))
            pred = rng.integers(0, 2, (n, labels))
            got = f1_multilabel(multilabel_accumulators(gt, pred))
            expected = np.mean([brute_f1(gt[:, j], pred[:, j]) for j in range(labels)])
            assert got == expected

    def test_miou_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(self.N_CASES):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(1, 64))
            gt = rng.integers(0, k, n)
            pred = rng.integers(0, k, n)
            assert miou(acc_from(gt, pred, k)) == brute_miou(gt, pred, k)

    def test_biou_oracle(self):
        rng = np.random.default_rng(14)
        done = 0
        while done < self.N_CASES:
            n = int(rng.integers(1, 64))
            gt = rng.integers(0, 2, n)
            pred = rng.integers(0, 2, n)
            try:
                expected = brute_biou(gt, pred)
            except MetricUndefinedError:
                with pytest.raises(MetricUndefinedError):
                    biou_minority(acc_from(gt, pred, 2))
                continue
            assert biou_minority(acc_from(gt, pred, 2)) == expected
            done += 1

    def test_all_metrics_in_unit_interval(self):
        rng = np.random.default_rng(15)
        for _ in range(200):
            k = int(rng.integers(2, 5))
            n = int(rng.integers(1, 50))
            gt = rng.integers(0, k, n)
            pred = rng.integers(0, k, n)
            assert 0.0 <= accuracy(acc_from(gt, pred, k)) <= 1.0
            assert 0.0 <= miou(acc_from(gt, pred, k)) <= 1.0
            if k == 2:
                assert 0.0 <= f1_binary(acc_from(gt, pred, 2)) <= 1.0


class TestMergeAssociativity:
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 5))
    @settings(max_examples=60, deadline=None)
    def test_merge_then_score_equals_concatenated(self, seed, k):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 80))
        gt = rng.integers(0, k, n)
        pred = rng.integers(0, k, n)
        cut = int(rng.integers(1, n))
        merged = acc_from(gt[:cut], pred[:cut], k).merge(acc_from(gt[cut:], pred[cut:], k))
        whole = acc_from(gt, pred, k)
        np.testing.assert_array_equal(merged.counts, whole.counts)
        assert accuracy(merged) == accuracy(whole)
        assert miou(merged) == miou(whole)
        if k == 2:
            assert f1_binary(merged) == f1_binary(whole)

    def test_merge_is_associative_elementwise_sum(self):
        rng = np.random.default_rng(20)
        parts = [acc_from(rng.integers(0, 3, 30), rng.integers(0, 3, 30), 3) for _ in range(3)]
        left = parts[0].merge(parts[1]).merge(parts[2])
        right = parts[0].merge(parts[1].merge(parts[2]))
        np.testing.assert_array_equal(left.counts, right.counts)


class TestDispatch:
    def test_known_names(self):
        acc = acc_from([0, 1], [0, 1], 2)
        assert score("accuracy", acc) == 1.0
        assert score("f1", acc) == 1.0
        assert score("miou", acc) == 1.0
        assert score("biou", acc) == 1.0

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            score("map", acc_from([0], [0], 2))
