"""Metric implementations against brute-force per-sample recomputation."""

import numpy as np
import pytest

from hmtl.metrics import (
    MetricSet,
    accuracy,
    classification_metrics,
    confusion_matrix,
    euler_mae,
    macro_f1,
    per_class_f1,
    rmse,
)


def brute_force_f1(y_true, y_pred, k):
    scores = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        if tp == 0 and fp == 0 and fn == 0:
            scores.append(0.0)
        else:
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores))


class TestConfusion:
    def test_row_sums_are_class_counts(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 5, size=200)
        y_pred = rng.integers(0, 5, size=200)
        cm = confusion_matrix(y_true, y_pred, 5)
        assert cm.sum() == 200
        for c in range(5):
            assert cm[c].sum() == int(np.sum(y_true == c))

    def test_label_range_checked(self):
        with pytest.raises(ValueError, match="outside"):
            confusion_matrix([0, 5], [0, 1], 3)


class TestMacroF1:
    def test_perfect_diagonal_is_one(self):
        cm = np.diag([4, 7, 2])
        assert macro_f1(cm) == 1.0

    def test_binary_five_five(self):
        cm = np.array([[5, 5], [5, 5]])
        assert per_class_f1(cm).tolist() == [0.5, 0.5]
        assert macro_f1(cm) == 0.5

    def test_matches_brute_force_on_random_inputs(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            k = int(rng.integers(2, 7))
            n = int(rng.integers(5, 60))
            y_true = rng.integers(0, k, size=n)
            y_pred = rng.integers(0, k, size=n)
            cm = confusion_matrix(y_true, y_pred, k)
            assert macro_f1(cm) == pytest.approx(brute_force_f1(y_true, y_pred, k), abs=1e-12)

    def test_absent_class_contributes_zero(self):
        # class 2 never appears in truth or prediction
        cm = confusion_matrix([0, 1, 0], [0, 1, 1], 3)
        f1 = per_class_f1(cm)
        assert f1[2] == 0.0

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="all zero"):
            macro_f1(np.zeros((3, 3)))

    def test_random_eight_way_macro_f1_near_paper_scale_anchor(self):
        # a uniformly random 8-class prediction lands near accuracy 1/8 with a
        # small macro F1 on imbalanced truth
        rng = np.random.default_rng(2)
        counts = np.array([4000, 2000, 1000, 500, 250, 125, 60, 30])
        y_true = np.repeat(np.arange(8), counts)
        y_pred = rng.integers(0, 8, size=counts.sum())
        acc = accuracy(y_true, y_pred)
        assert acc == pytest.approx(0.125, abs=0.02)
        assert macro_f1(confusion_matrix(y_true, y_pred, 8)) < 0.15


class TestRegressionMetrics:
    def test_rmse_matches_manual(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            pred = rng.normal(size=20)
            true = rng.normal(size=20)
            assert rmse(pred, true) == pytest.approx(float(np.sqrt(np.mean((pred - true) ** 2))), rel=1e-12)

    def test_euler_mae_zero_for_exact(self):
        angles = np.random.default_rng(4).uniform(-99, 99, size=(10, 3))
        assert euler_mae(angles, angles) == (0.0, 0.0, 0.0, 0.0)

    def test_euler_mae_constant_yaw_offset(self):
        true = np.zeros((5, 3))
        pred = true.copy()
        pred[:, 0] += 2.0
        yaw, pitch, roll, avg = euler_mae(pred, true)
        assert yaw == pytest.approx(2.0)
        assert pitch == roll == 0.0
        assert avg == pytest.approx(2.0 / 3.0)

    def test_euler_mae_brute_force(self):
        rng = np.random.default_rng(5)
        pred = rng.uniform(-99, 99, size=(30, 3))
        true = rng.uniform(-99, 99, size=(30, 3))
        yaw, pitch, roll, avg = euler_mae(pred, true)
        manual = [float(np.mean([abs(p[i] - t[i]) for p, t in zip(pred, true)])) for i in range(3)]
        assert (yaw, pitch, roll) == pytest.approx(tuple(manual), rel=1e-12)
        assert avg == pytest.approx(float(np.mean(manual)), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            euler_mae(np.zeros((3, 3)), np.zeros((4, 3)))


class TestMetricSet:
    def test_flat_keys(self):
        ms = classification_metrics([0, 1, 1], [0, 1, 0], 2)
        flat = ms.flat()
        assert set(flat) == {"accuracy", "macro_f1"}
        ms2 = MetricSet(rmse_per_axis={"valence": 0.3}, mae_per_angle={"yaw": 2.0}, average_mae=2.0)
        flat2 = ms2.flat()
        assert flat2["rmse_valence"] == 0.3
        assert flat2["mae_yaw"] == 2.0
        assert flat2["mae_average"] == 2.0
