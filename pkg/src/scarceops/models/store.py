"""The model database: append-only run log, checkpoints and model records.

``runs.jsonl`` gets one full snapshot per status change; the last line for
a run id is its current state. ``models.jsonl`` works the same way for model
records. Checkpoints live in ``checkpoints/<content_hash>.ckpt``.
"""

from __future__ import annotations

import json
import math
import os
import threading
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

from filelock import FileLock

from ..embedder.checkpoint import Checkpoint, CheckpointError, decode_checkpoint
from ..errors import ConflictError, NoModelError, NotFoundError, StorageError, ValidationError
from ..datasets.store import utc_now

STATUSES = ("pending", "running", "failed", "succeeded")
TRANSITIONS = {"pending": {"running"}, "running": {"failed", "succeeded"}, "failed": set(), "succeeded": set()}


def _metric_to_json(v: float) -> Optional[float]:
    return None if v == -math.inf else float(v)


def _metric_from_json(v) -> float:
    return -math.inf if v is None else float(v)


@dataclass
class RunRecord:
    task_id: str
    metric_name: str
    run_id: str = ""
    strategy_plan: dict = field(default_factory=dict)
    hyperparameters: dict = field(default_factory=dict)
    status: str = "pending"
    metric_value: float = -math.inf
    loss_history: list[float] = field(default_factory=list)
    epochs: int = 0
    trial_index: int = 0
    checkpoint_hash: Optional[str] = None
    model_id: Optional[str] = None
    started_at: Optional[str] = None
    ended_at: Optional[str] = None
    failure_reason: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric_value"] = _metric_to_json(self.metric_value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["metric_value"] = _metric_from_json(d.get("metric_value"))
        return cls(**d)

    def check(self) -> None:
        if self.status not in STATUSES:
            raise ValidationError(f"unknown status {self.status!r}")
        if self.status == "succeeded":
            if not self.checkpoint_hash or not math.isfinite(self.metric_value):
                raise ValidationError("a succeeded run needs a checkpoint and a finite metric")
        if self.status == "failed" and not self.failure_reason:
            raise ValidationError("a failed run needs a failure_reason")


@dataclass
class ModelRecord:
    model_id: str
    architecture: dict
    checkpoint_hash: str
    run_id: str
    task_id: str
    created_at: str
    performances: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelRecord":
        return cls(**d)


def best_key(run: RunRecord) -> tuple:
    """Sort key for choosing m*: higher metric, then fewer epochs, then earlier end."""
    return (-run.metric_value, run.epochs, run.ended_at or "", run.run_id)


def choose_best(runs, task_id: str = "") -> RunRecord:
    done = [r for r in runs if r.status == "succeeded"]
    if not done:
        raise NoModelError(f"task {task_id!r} has no succeeded runs (A_t = -inf)")
    return min(done, key=best_key)


class ModelStore:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root) / "models"
        (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))
        self._tlock = threading.RLock()

    @property
    def runs_path(self) -> Path:
        return self.root / "runs.jsonl"

    @property
    def models_path(self) -> Path:
        return self.root / "models.jsonl"

    def _append(self, path: Path, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
        try:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StorageError(f"cannot append to {path.name}: {exc}") from exc

    @staticmethod
    def _read_lines(path: Path) -> list[dict]:
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return []
        out = []
        for line in text.splitlines():
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                continue  # a torn final line from an interrupted append
        return out

    # -- runs

    def run_log(self) -> list[RunRecord]:
        """Every snapshot ever written, oldest first."""
        return [RunRecord.from_dict(d) for d in self._read_lines(self.runs_path)]

    def _latest_runs(self) -> dict[str, RunRecord]:
        latest: dict[str, RunRecord] = {}
        for rec in self.run_log():
            latest[rec.run_id] = rec
        return latest

    def runs(self, task_id: Optional[str] = None) -> list[RunRecord]:
        out = list(self._latest_runs().values())
        return [r for r in out if task_id is None or r.task_id == task_id]

    def get_run(self, run_id: str) -> RunRecord:
        run = self._latest_runs().get(run_id)
        if run is None:
            raise NotFoundError(f"unknown run {run_id!r}")
        return run

    def record_run(self, run: RunRecord) -> str:
        """Create a run (status pending) or append its next legal status."""
        run.check()
        with self._tlock, self._lock:
            latest = self._latest_runs()
            if not run.run_id:
                run.run_id = f"run-{len(latest) + 1:06d}-{uuid.uuid4().hex[:6]}"
            prev = latest.get(run.run_id)
            if prev is None:
                if run.status != "pending":
                    raise ConflictError(f"new run must start as pending, got {run.status!r}")
            else:
                if run.status not in TRANSITIONS[prev.status]:
                    raise ConflictError(f"illegal status transition {prev.status} -> {run.status} for {run.run_id}")
                if run.task_id != prev.task_id:
                    raise ConflictError("a run cannot move to another task")
            if run.status == "running" and not run.started_at:
                run.started_at = utc_now()
            if run.status in ("failed", "succeeded") and not run.ended_at:
                run.ended_at = utc_now()
            self._append(self.runs_path, run.to_dict())
            return run.run_id

    # -- checkpoints

    def _ckpt_path(self, digest: str) -> Path:
        if not digest or not all(c in "0123456789abcdef" for c in digest):
            raise ValidationError(f"bad checkpoint hash {digest!r}")
        return self.root / "checkpoints" / f"{digest}.ckpt"

    def put_checkpoint(self, data: bytes) -> str:
        try:
            digest = decode_checkpoint(data).content_hash
        except CheckpointError as exc:
            raise ValidationError(f"refusing to store invalid checkpoint: {exc}") from exc
        path = self._ckpt_path(digest)
        if not path.exists():
            tmp = path.with_name(f".{digest}.{uuid.uuid4().hex}.tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return digest

    def load_checkpoint(self, digest: str) -> Checkpoint:
        path = self._ckpt_path(digest)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"no checkpoint {digest}") from None
        try:
            ck = decode_checkpoint(data)
        except CheckpointError as exc:
            raise StorageError(f"checkpoint {digest[:12]} is corrupt: {exc}") from exc
        if ck.content_hash != digest:
            raise StorageError(f"checkpoint file {digest[:12]} holds {ck.content_hash[:12]}")
        return ck

    # -- models

    def models(self) -> list[ModelRecord]:
        latest: dict[str, ModelRecord] = {}
        for d in self._read_lines(self.models_path):
            latest[d["model_id"]] = ModelRecord.from_dict(d)
        return list(latest.values())

    def get_model(self, model_id: str) -> ModelRecord:
        for m in self.models():
            if m.model_id == model_id:
                return m
        raise NotFoundError(f"unknown model {model_id!r}")

    def register_model(self, architecture: dict, checkpoint_hash: str, run_id: str, task_id: str) -> ModelRecord:
        """Model ids derive from the checkpoint hash, so identical weights share one record."""
        self._ckpt_path(checkpoint_hash)
        if not self._ckpt_path(checkpoint_hash).exists():
            raise NotFoundError(f"no checkpoint {checkpoint_hash}")
        model_id = "m-" + checkpoint_hash[:16]
        with self._tlock, self._lock:
            for m in self.models():
                if m.model_id == model_id:
                    return m
            rec = ModelRecord(model_id, dict(architecture), checkpoint_hash, run_id, task_id, utc_now())
            self._append(self.models_path, rec.to_dict())
            return rec

    def add_performance(self, model_id: str, dataset_id: str, version: int, metric_name: str,
                        value: float) -> ModelRecord:
        with self._tlock, self._lock:
            rec = self.get_model(model_id)
            key = (dataset_id, version, metric_name)
            rec.performances = [p for p in rec.performances
                                if (p["dataset_id"], p["version"], p["metric_name"]) != key]
            rec.performances.append({"dataset_id": dataset_id, "version": version,
                                     "metric_name": metric_name, "value": float(value)})
            self._append(self.models_path, rec.to_dict())
            return rec

    # -- selection

    def best_run(self, task_id: str) -> RunRecord:
        return choose_best(self.runs(task_id), task_id)

    def select_best(self, task_id: str) -> ModelRecord:
        run = self.best_run(task_id)
        if not run.model_id:
            raise StorageError(f"succeeded run {run.run_id} has no model record")
        return self.get_model(run.model_id)
