"""Registered tasks: a dataset, a metric, a task kind and the running best metric."""

from __future__ import annotations

import json
import math
import os
import threading
import uuid
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

from filelock import FileLock

from ..datasets.store import TASK_KINDS, utc_now
from ..errors import NotFoundError, StorageError, ValidationError
from ..models.metrics import check_metric


@dataclass
class TaskSpec:
    task_id: str
    dataset_id: str
    version: int
    metric_name: str
    task_kind: str
    current_best_metric: float = -math.inf
    best_model_id: Optional[str] = None
    created_at: str = ""

    @property
    def dataset_key(self) -> str:
        return f"{self.dataset_id}@v{self.version}"

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no infinity; null stands for "no succeeded run yet"
        d["current_best_metric"] = None if self.current_best_metric == -math.inf else self.current_best_metric
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        v = d.get("current_best_metric")
        d["current_best_metric"] = -math.inf if v is None else float(v)
        return cls(**d)


class TaskStore:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.path = self.root / "tasks.json"
        self._lock = FileLock(str(self.root / ".tasks.lock"))
        self._tlock = threading.RLock()

    def _read(self) -> dict[str, dict]:
        try:
            return json.loads(self.path.read_text(encoding="utf-8"))["tasks"]
        except FileNotFoundError:
            return {}
        except (json.JSONDecodeError, KeyError) as exc:
            raise StorageError(f"task registry is corrupt: {exc}") from exc

    def _write(self, tasks: dict[str, dict]) -> None:
        tmp = self.path.with_name(f".tasks-{uuid.uuid4().hex}.tmp")
        tmp.write_text(json.dumps({"tasks": tasks}, sort_keys=True, indent=1), encoding="utf-8")
        os.replace(tmp, self.path)

    def list(self) -> list[TaskSpec]:
        return [TaskSpec.from_dict(d) for _, d in sorted(self._read().items())]

    def get(self, task_id: str) -> TaskSpec:
        d = self._read().get(task_id)
        if d is None:
            raise NotFoundError(f"unknown task {task_id!r}")
        return TaskSpec.from_dict(d)

    def create(self, dataset_id: str, version: int, metric_name: str, task_kind: str) -> TaskSpec:
        if task_kind not in TASK_KINDS:
            raise ValidationError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
        check_metric(metric_name, task_kind)
        with self._tlock, self._lock:
            tasks = self._read()
            task = TaskSpec(f"task-{len(tasks) + 1:04d}", dataset_id, int(version), metric_name, task_kind,
                            created_at=utc_now())
            tasks[task.task_id] = task.to_dict()
            self._write(tasks)
            return task

    def record_best(self, task_id: str, value: float, model_id: str) -> TaskSpec:
        """Raise A_t to ``value`` if it improves on it; A_t never decreases."""
        if not math.isfinite(value):
            raise ValidationError("best metric must be finite")
        with self._tlock, self._lock:
            tasks = self._read()
            if task_id not in tasks:
                raise NotFoundError(f"unknown task {task_id!r}")
            task = TaskSpec.from_dict(tasks[task_id])
            if value > task.current_best_metric:
                task.current_best_metric = float(value)
                task.best_model_id = model_id
                tasks[task_id] = task.to_dict()
                self._write(tasks)
            return task

    def rebind(self, task_id: str, dataset_id: str, version: int) -> TaskSpec:
        """Point a task at a newer dataset version (continuous training)."""
        with self._tlock, self._lock:
            tasks = self._read()
            if task_id not in tasks:
                raise NotFoundError(f"unknown task {task_id!r}")
            task = TaskSpec.from_dict(tasks[task_id])
            task.dataset_id, task.version = dataset_id, int(version)
            tasks[task_id] = task.to_dict()
            self._write(tasks)
            return task
