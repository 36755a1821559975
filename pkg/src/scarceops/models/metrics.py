"""Task metrics, all oriented so that larger is better."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError

METRICS = {
    "accuracy": "classification",
    "macro_f1": "classification",
    "neg_mse": "reconstruction",
}


def check_metric(metric_name: str, task_kind: str) -> None:
    if metric_name not in METRICS:
        raise ValidationError(f"unknown metric {metric_name!r}; supported: {sorted(METRICS)}")
    if METRICS[metric_name] != task_kind:
        raise ValidationError(f"metric {metric_name!r} does not apply to {task_kind} tasks")


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    t, p = np.asarray(y_true).ravel(), np.asarray(y_pred).ravel()
    if t.shape != p.shape:
        raise ValidationError(f"{t.size} labels vs {p.size} predictions")
    if t.size == 0:
        raise ValidationError("cannot score an empty prediction set")
    return t, p


def accuracy(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float(np.mean(t == p))


def macro_f1(y_true, y_pred) -> float:
    """Unweighted mean of per-class F1 over every label seen in either array."""
    t, p = _pair(y_true, y_pred)
    scores = []
    for c in np.union1d(t, p):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def neg_mse(target, reconstruction) -> float:
    a = np.asarray(target, dtype=np.float64)
    b = np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return -float(np.mean((a - b) ** 2))


def score(metric_name: str, y_true, y_pred) -> float:
    fn = {"accuracy": accuracy, "macro_f1": macro_f1, "neg_mse": neg_mse}.get(metric_name)
    if fn is None:
        raise ValidationError(f"unknown metric {metric_name!r}")
    return fn(y_true, y_pred)
