"""Production monitoring: sliding feedback window, windowed metric and drift alerts."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from ..datasets.store import utc_now
from ..errors import ValidationError
from ..models.metrics import score

PERFORMANCE_DROP = "PERFORMANCE_DROP"
EMBEDDING_DRIFT = "EMBEDDING_DRIFT"


@dataclass
class MonitorConfig:
    window: int = 100
    delta: float = 0.05
    z_threshold: float = 3.0
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        if self.delta < 0 or self.z_threshold <= 0:
            raise ValidationError("delta must be >= 0 and z_threshold > 0")


@dataclass
class Sample:
    image_id: str
    fingerprint: list[float]
    label: Optional[int]
    prediction: Optional[int]
    loss: Optional[float] = None  # per-image reconstruction error for reconstruction tasks

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Alert:
    kind: str
    task_id: str
    value: float
    threshold: float
    window_size: int
    feedback_count: int
    raised_at: str = field(default_factory=utc_now)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MetricPoint:
    timestamp: str
    value: float
    window_size: int
    feedback_count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MonitorState:
    task_id: str
    metric_name: str
    mu_ref: list[float]
    sigma_ref: list[float]
    a_base: float
    config: MonitorConfig = field(default_factory=MonitorConfig)
    window: deque = field(default_factory=deque)
    feedback_count: int = 0
    last_fired: dict[str, int] = field(default_factory=dict)  # alert kind -> feedback_count when raised

    @classmethod
    def from_reference(cls, task_id: str, metric_name: str, reference: np.ndarray, a_base: float,
                       config: Optional[MonitorConfig] = None) -> "MonitorState":
        """Freeze the reference statistics from validation fingerprints [n, d]."""
        ref = np.asarray(reference, dtype=np.float64)
        if ref.ndim != 2 or len(ref) == 0:
            raise ValidationError("reference fingerprints must be a non-empty [n, d] array")
        return cls(task_id, metric_name, ref.mean(0).tolist(), ref.std(0).tolist(), float(a_base),
                   config or MonitorConfig())

    def add(self, sample: Sample) -> None:
        self.window.append(sample)
        while len(self.window) > self.config.window:
            self.window.popleft()
        self.feedback_count += 1

    @property
    def full(self) -> bool:
        return len(self.window) >= self.config.window

    def windowed_metric(self) -> float:
        if not self.window:
            return -math.inf
        if self.metric_name == "neg_mse":
            return -float(np.mean([s.loss for s in self.window]))
        return score(self.metric_name, [s.label for s in self.window], [s.prediction for s in self.window])

    def drift_z(self) -> float:
        win = np.array([s.fingerprint for s in self.window], dtype=np.float64)
        gap = np.linalg.norm(win.mean(0) - np.asarray(self.mu_ref))
        spread = np.linalg.norm(np.asarray(self.sigma_ref)) / math.sqrt(self.config.window)
        return float(gap / (spread + self.config.eps))

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "metric_name": self.metric_name,
            "mu_ref": self.mu_ref,
            "sigma_ref": self.sigma_ref,
            "a_base": self.a_base,
            "config": dict(self.config.__dict__),
            "window": [s.to_dict() for s in self.window],
            "feedback_count": self.feedback_count,
            "last_fired": dict(self.last_fired),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonitorState":
        st = cls(d["task_id"], d["metric_name"], d["mu_ref"], d["sigma_ref"], d["a_base"],
                 MonitorConfig(**d["config"]))
        st.window = deque(Sample(**s) for s in d["window"])
        st.feedback_count = d["feedback_count"]
        st.last_fired = dict(d["last_fired"])
        return st


class DriftDetector(Protocol):
    def __call__(self, state: MonitorState) -> list[tuple[str, float, float]]: ...


def default_detector(state: MonitorState) -> list[tuple[str, float, float]]:
    """Conditions currently true, as (kind, value, threshold); only judged on a full window."""
    if not state.full:
        return []
    out = []
    a_t = state.windowed_metric()
    if a_t < state.a_base - state.config.delta:
        out.append((PERFORMANCE_DROP, a_t, state.a_base - state.config.delta))
    z = state.drift_z()
    if z > state.config.z_threshold:
        out.append((EMBEDDING_DRIFT, z, state.config.z_threshold))
    return out


def check_drift(state: MonitorState, detector: Callable[[MonitorState], list] = default_detector) -> list[Alert]:
    """New alerts for the current window.

    A condition that already fired is only reported again once the window
    has turned over completely, so re-checking an unchanged window is silent.
    """
    alerts = []
    for kind, value, threshold in detector(state):
        last = state.last_fired.get(kind)
        if last is not None and state.feedback_count - last < state.config.window:
            continue
        state.last_fired[kind] = state.feedback_count
        alerts.append(Alert(kind, state.task_id, float(value), float(threshold), len(state.window),
                            state.feedback_count))
    return alerts
