"""Evaluation metrics: accuracy, macro F1, per-axis RMSE and Euler-angle MAE."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """K x K count matrix; rows are true classes, columns predictions."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"{t.shape[0]} labels vs {p.shape[0]} predictions")
    if t.size and (t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def accuracy(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape or t.size == 0:
        raise ValueError("need equal-length, non-empty label vectors")
    return float(np.mean(t == p))


def per_class_f1(confusion: np.ndarray) -> np.ndarray:
    """F1 per class; a class with zero support and zero predictions scores 0."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion counts must be nonnegative")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    return f1


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean of the per-class F1 scores."""
    cm = np.asarray(confusion)
    if cm.sum() == 0:
        raise ValueError("confusion matrix is all zero")
    return float(per_class_f1(cm).mean())


def rmse(pred: Sequence[float], true: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("need equal-length, non-empty vectors")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def euler_mae(pred: np.ndarray, true: np.ndarray) -> Tuple[float, float, float, float]:
    """Per-angle mean absolute error in degrees for (yaw, pitch, roll) triples.

    Returns (yaw_mae, pitch_mae, roll_mae, average).
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3 or p.shape[0] == 0:
        raise ValueError(f"need matching (N, 3) angle arrays, got {p.shape} and {t.shape}")
    maes = np.mean(np.abs(p - t), axis=0)
    return float(maes[0]), float(maes[1]), float(maes[2]), float(maes.mean())


@dataclass
class MetricSet:
    """Metric bundle for one evaluation pass."""

    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    confusion: Optional[np.ndarray] = None
    rmse_per_axis: Dict[str, float] = field(default_factory=dict)
    mae_per_angle: Dict[str, float] = field(default_factory=dict)
    average_mae: Optional[float] = None

    def flat(self) -> Dict[str, float]:
        """Flatten into metric-name -> value pairs for CSV emission."""
        out: Dict[str, float] = {}
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        if self.macro_f1 is not None:
            out["macro_f1"] = self.macro_f1
        for axis, value in self.rmse_per_axis.items():
            out[f"rmse_{axis}"] = value
        for angle, value in self.mae_per_angle.items():
            out[f"mae_{angle}"] = value
        if self.average_mae is not None:
            out["mae_average"] = self.average_mae
        return out


def classification_metrics(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> MetricSet:
    cm = confusion_matrix(y_true, y_pred, num_classes)
    return MetricSet(accuracy=accuracy(y_true, y_pred), macro_f1=macro_f1(cm), confusion=cm)


def regression_metrics(pred: np.ndarray, true: np.ndarray, axes: Sequence[str]) -> MetricSet:
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_2d(np.asarray(true, dtype=np.float64))
    ms = MetricSet()
    if tuple(axes) == ("yaw", "pitch", "roll"):
        yaw, pitch, roll, avg = euler_mae(p, t)
        ms.mae_per_angle = {"yaw": yaw, "pitch": pitch, "roll": roll}
        ms.average_mae = avg
    else:
        for i, axis in enumerate(axes):
            ms.rmse_per_axis[axis] = rmse(p[:, i], t[:, i])
    return ms
