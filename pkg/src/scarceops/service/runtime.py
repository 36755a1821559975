"""Serving state behind the HTTP API: deployments, predictions, feedback, CT cycles.

Per-task state lives under ``<root>/monitor/<task_id>/``::

    state.json      frozen reference statistics and the feedback window
    metrics.jsonl   one windowed-metric point per feedback call
    alerts.jsonl    raised alerts
    ct.jsonl        continuous-training cycle snapshots
    images/         uint8 [3, 32, 32] blobs of every predicted image
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from filelock import FileLock

from ..automl import SearchSpace
from ..datasets.container import ImageContainer
from ..datasets.npy import read_npy
from ..datasets.store import utc_now
from ..errors import ConflictError, NotFoundError, ValidationError
from ..models.networks import compatible, evaluate, evaluation_split, infer, network_from_checkpoint
from ..tensor import Module
from ..workspace import Workspace
from .monitor import Alert, MetricPoint, MonitorConfig, MonitorState, Sample, check_drift

logger = logging.getLogger(__name__)

RAW_IMAGE_BYTES = 3 * 32 * 32


def normalize_image(image) -> np.ndarray:
    """Accept an image in any common layout and return float32 [3, 32, 32] in [0, 1].

    ``bytes`` may hold an NPY file or 3072 raw uint8 values in CHW order.
    Integer arrays are read as 0..255, float arrays as 0..1.
    """
    if isinstance(image, (bytes, bytearray)):
        if len(image) == 0:
            raise ValidationError("empty image payload")
        if bytes(image[:6]) == b"\x93NUMPY":
            arr = read_npy(bytes(image))
        elif len(image) == RAW_IMAGE_BYTES:
            arr = np.frombuffer(bytes(image), dtype=np.uint8).reshape(3, 32, 32)
        else:
            raise ValidationError(f"raw image payload must be {RAW_IMAGE_BYTES} bytes or an NPY file")
    else:
        try:
            arr = np.asarray(image)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"malformed image: {exc}") from exc
    if arr.dtype == object or arr.size == 0:
        raise ValidationError("malformed image: expected a rectangular numeric array")
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.shape == (32, 32):
        arr = np.repeat(arr[None], 3, axis=0)
    elif arr.shape == (32, 32, 3):
        arr = arr.transpose(2, 0, 1)
    elif arr.shape == (32, 32, 1) or arr.shape == (1, 32, 32):
        arr = np.repeat(arr.reshape(1, 32, 32), 3, axis=0)
    elif arr.shape != (3, 32, 32):
        raise ValidationError(f"image must be 32x32 gray or RGB, got shape {list(arr.shape)}")
    if arr.dtype.kind in "ui":
        if arr.min() < 0 or arr.max() > 255:
            raise ValidationError("integer pixels must lie in 0..255")
        return arr.astype(np.float32) / 255.0
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise ValidationError("float pixels must be finite and lie in [0, 1]")
        return arr.astype(np.float32)
    if arr.dtype.kind == "b":
        return arr.astype(np.float32)
    raise ValidationError(f"unsupported pixel dtype {arr.dtype}")


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def image_id_of(u8: np.ndarray) -> str:
    return hashlib.sha256(u8.tobytes()).hexdigest()[:24]


@dataclass
class Deployment:
    deployment_id: str
    task_id: str
    model_id: str
    embedder_version: str
    deployed_at: str
    status: str = "live"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CTCycle:
    cycle_id: str
    task_id: str
    alert: dict
    status: str = "queued"  # queued -> running -> succeeded | failed
    coalesced: int = 0
    queued_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None
    dataset: Optional[str] = None
    A_before: Optional[float] = None
    A_after: Optional[float] = None
    model_before: Optional[str] = None
    model_after: Optional[str] = None
    run_ids: list[str] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CTConfig:
    enabled: bool = True
    k: int = 2
    space: SearchSpace = field(default_factory=lambda: SearchSpace(trials=2))


def _finite_or_none(v: float) -> Optional[float]:
    return None if v is None or not math.isfinite(v) else float(v)


class ServingRuntime:
    def __init__(self, ws: Workspace, monitor: Optional[MonitorConfig] = None, ct: Optional[CTConfig] = None,
                 detector: Optional[Callable] = None):
        self.ws = ws
        self.monitor_config = monitor or MonitorConfig()
        self.ct = ct or CTConfig()
        self.detector = detector
        self.base = ws.root / "monitor"
        self.base.mkdir(exist_ok=True)
        self._deploy_lock = FileLock(str(self.base / ".deployments.lock"))
        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()
        self._models: dict[str, Module] = {}
        self._states: dict[str, MonitorState] = {}
        self._ct_threads: dict[str, threading.Thread] = {}
        self._ct_active: dict[str, CTCycle] = {}

    # -- plumbing

    def _lock(self, task_id: str) -> threading.RLock:
        with self._locks_guard:
            return self._locks.setdefault(task_id, threading.RLock())

    def _dir(self, task_id: str) -> Path:
        d = self.base / task_id
        (d / "images").mkdir(parents=True, exist_ok=True)
        return d

    @staticmethod
    def _append(path: Path, obj: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")

    @staticmethod
    def _lines(path: Path) -> list[dict]:
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return []
        return [json.loads(l) for l in text.splitlines() if l.strip()]

    def _write_json(self, path: Path, obj) -> None:
        tmp = path.with_name(f".{uuid.uuid4().hex}.tmp")
        tmp.write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    def _model(self, model_id: str) -> Module:
        m = self._models.get(model_id)
        if m is None:
            rec = self.ws.models.get_model(model_id)
            m = network_from_checkpoint(self.ws.models.load_checkpoint(rec.checkpoint_hash))
            self._models[model_id] = m
        return m

    # -- deployments

    @property
    def _deploy_path(self) -> Path:
        return self.base / "deployments.json"

    def deployments(self, task_id: Optional[str] = None) -> list[Deployment]:
        try:
            raw = json.loads(self._deploy_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raw = []
        out = [Deployment(**d) for d in raw]
        return [d for d in out if task_id is None or d.task_id == task_id]

    def live(self, task_id: str) -> Deployment:
        for d in self.deployments(task_id):
            if d.status == "live":
                return d
        raise NotFoundError(f"task {task_id!r} has no live deployment")

    def deploy(self, task_id: str, model_id: Optional[str] = None) -> Deployment:
        """Make ``model_id`` (m* by default) the live model and reset monitoring."""
        task = self.ws.tasks.get(task_id)
        emb = self.ws.require_embedder()
        if model_id is None:
            model_id = self.ws.models.select_best(task_id).model_id
        rec = self.ws.models.get_model(model_id)
        c = self.ws.datasets.load_container(task.dataset_id, task.version)
        why = compatible(rec.architecture, task.task_kind, len(c.classes))
        if why:
            raise ValidationError(why)
        model = self._model(model_id)
        split = evaluation_split(c.splits)
        ref_x = c.images(split)
        ref_codes = self.ws.encode(ref_x, emb.version)
        a_base = evaluate(model, task.metric_name, task.task_kind, ref_x, c.labels[c.split_slice(split)])
        with self._lock(task_id), self._deploy_lock:
            all_deps = self.deployments()
            for d in all_deps:
                if d.task_id == task_id and d.status == "live":
                    d.status = "superseded"
            dep = Deployment(f"dep-{uuid.uuid4().hex[:12]}", task_id, model_id, emb.version, utc_now())
            all_deps.append(dep)
            self._write_json(self._deploy_path, [d.to_dict() for d in all_deps])
            state = MonitorState.from_reference(task_id, task.metric_name, ref_codes, a_base, self.monitor_config)
            self._states[task_id] = state
            self._save_state(state)
        logger.info("deployed %s for %s (A_base=%.4f)", model_id, task_id, a_base)
        return dep

    # -- monitor state

    def _save_state(self, state: MonitorState) -> None:
        self._write_json(self._dir(state.task_id) / "state.json", state.to_dict())

    def state(self, task_id: str) -> MonitorState:
        st = self._states.get(task_id)
        if st is None:
            path = self._dir(task_id) / "state.json"
            if not path.exists():
                raise NotFoundError(f"task {task_id!r} has no live deployment")
            st = MonitorState.from_dict(json.loads(path.read_text(encoding="utf-8")))
            self._states[task_id] = st
        return st

    # -- serving

    def predict(self, task_id: str, image) -> dict:
        dep = self.live(task_id)
        task = self.ws.tasks.get(task_id)
        x = normalize_image(image)
        u8 = to_u8(x)
        iid = image_id_of(u8)
        path = self._dir(task_id) / "images" / f"{iid}.u8"
        if not path.exists():
            tmp = path.with_name(f".{uuid.uuid4().hex}.tmp")
            tmp.write_bytes(u8.tobytes())
            os.replace(tmp, path)
        xq = u8.astype(np.float32)[None] / 255.0  # serve exactly what is stored for feedback
        model = self._model(dep.model_id)
        out = infer(model, xq)[0]
        fp = self.ws.encode(xq, dep.embedder_version)[0]
        result = {"image_id": iid, "model_id": dep.model_id, "fingerprint": [float(v) for v in fp]}
        if task.task_kind == "classification":
            result["prediction"] = int(np.argmax(out))
            result["scores"] = [float(v) for v in out]
        else:
            result["prediction"] = None
            result["reconstruction_error"] = float(np.mean((out - xq[0]) ** 2))
        return result

    def stored_image(self, task_id: str, image_id: str) -> np.ndarray:
        if not image_id or not all(c in "0123456789abcdef" for c in image_id):
            raise ValidationError(f"bad image id {image_id!r}")
        path = self._dir(task_id) / "images" / f"{image_id}.u8"
        if not path.exists():
            raise NotFoundError(f"unknown image id {image_id!r} for {task_id}")
        return np.frombuffer(path.read_bytes(), dtype=np.uint8).reshape(3, 32, 32)

    def feedback(self, task_id: str, label: Optional[int], image_id: Optional[str] = None, image=None) -> dict:
        """Score one production sample, update the window and run the drift checks."""
        if (image_id is None) == (image is None):
            raise ValidationError("give exactly one of image_id or image")
        task = self.ws.tasks.get(task_id)
        if task.task_kind == "classification":
            if label is None or int(label) < 0:
                raise ValidationError("classification feedback needs a non-negative label")
        if image is not None:
            image_id = self.predict(task_id, image)["image_id"]
        u8 = self.stored_image(task_id, image_id)
        with self._lock(task_id):
            dep = self.live(task_id)
            state = self.state(task_id)
            xq = u8.astype(np.float32)[None] / 255.0
            out = infer(self._model(dep.model_id), xq)[0]
            fp = self.ws.encode(xq, dep.embedder_version)[0]
            if task.task_kind == "classification":
                sample = Sample(image_id, [float(v) for v in fp], int(label), int(np.argmax(out)))
            else:
                sample = Sample(image_id, [float(v) for v in fp], None, None, float(np.mean((out - xq[0]) ** 2)))
            state.add(sample)
            a_t = state.windowed_metric()
            point = MetricPoint(utc_now(), a_t, len(state.window), state.feedback_count)
            self._append(self._dir(task_id) / "metrics.jsonl", point.to_dict())
            alerts = check_drift(state, self.detector) if self.detector else check_drift(state)
            for a in alerts:
                self._append(self._dir(task_id) / "alerts.jsonl", a.to_dict())
            self._save_state(state)
        cycles = []
        if alerts and self.ct.enabled:
            cycles = [self.trigger_ct(task_id, alerts[0]).to_dict()]
        return {
            "A_t": a_t,
            "window_size": len(state.window),
            "feedback_count": state.feedback_count,
            "alerts": [a.to_dict() for a in alerts],
            "ct": cycles,
        }

    def metrics(self, task_id: str) -> list[dict]:
        self.ws.tasks.get(task_id)
        return self._lines(self._dir(task_id) / "metrics.jsonl")

    def alerts(self, task_id: str) -> list[dict]:
        self.ws.tasks.get(task_id)
        return self._lines(self._dir(task_id) / "alerts.jsonl")

    # -- continuous training

    def ct_cycles(self, task_id: str) -> list[dict]:
        latest: dict[str, dict] = {}
        for d in self._lines(self._dir(task_id) / "ct.jsonl"):
            latest[d["cycle_id"]] = d
        return list(latest.values())

    def _log_cycle(self, cycle: CTCycle) -> None:
        self._append(self._dir(cycle.task_id) / "ct.jsonl", cycle.to_dict())

    def trigger_ct(self, task_id: str, alert: Alert, wait: bool = False) -> CTCycle:
        """Queue a development cycle for ``task_id``; joins the one in flight if any."""
        self.ws.tasks.get(task_id)
        with self._lock(task_id):
            active = self._ct_active.get(task_id)
            if active is not None:
                active.coalesced += 1
                self._log_cycle(active)
                cycle = active
                thread = self._ct_threads.get(task_id)
            else:
                cycle = CTCycle(f"ct-{uuid.uuid4().hex[:12]}", task_id, alert.to_dict())
                self._ct_active[task_id] = cycle
                self._log_cycle(cycle)
                thread = threading.Thread(target=self._run_cycle, args=(cycle,), name=f"ct-{task_id}", daemon=True)
                self._ct_threads[task_id] = thread
                thread.start()
        if wait and thread is not None:
            thread.join()
        return cycle

    def wait_ct(self, task_id: str, timeout: Optional[float] = None) -> None:
        thread = self._ct_threads.get(task_id)
        if thread is not None:
            thread.join(timeout)

    def ct_in_flight(self, task_id: str) -> bool:
        return task_id in self._ct_active

    def _window_container(self, task_id: str) -> tuple[ImageContainer, list[str]]:
        task = self.ws.tasks.get(task_id)
        base = self.ws.datasets.load_container(task.dataset_id, task.version)
        with self._lock(task_id):
            samples = list(self.state(task_id).window)
        if not samples:
            raise ValidationError("feedback window is empty")
        px = np.stack([self.stored_image(task_id, s.image_id) for s in samples])
        labels = np.array([s.label if s.label is not None else 0 for s in samples])
        if labels.max() >= len(base.classes):
            raise ValidationError(f"feedback label {labels.max()} outside the task's {len(base.classes)} classes")
        # window images join the training split; held-out splits stay as they were
        order = list(base.splits)
        pieces_px, pieces_y, splits, pos = [], [], {}, 0
        for name in (["train"] if "train" not in order else []) + order:
            a, b = base.splits.get(name, (0, 0))
            chunk_px, chunk_y = base.pixels[a:b], base.labels[a:b]
            if name == "train":
                chunk_px = np.concatenate([chunk_px, px])
                chunk_y = np.concatenate([chunk_y, labels.astype(np.uint16)])
            pieces_px.append(chunk_px)
            pieces_y.append(chunk_y)
            splits[name] = (pos, pos + len(chunk_px))
            pos += len(chunk_px)
        c = ImageContainer(base.name, np.concatenate(pieces_px), np.concatenate(pieces_y), splits, base.classes)
        return c, [s.image_id for s in samples]

    def _run_cycle(self, cycle: CTCycle) -> None:
        task_id = cycle.task_id
        try:
            cycle.status = "running"
            self._log_cycle(cycle)
            task = self.ws.tasks.get(task_id)
            cycle.A_before = _finite_or_none(task.current_best_metric)
            cycle.model_before = self.live(task_id).model_id
            container, ids = self._window_container(task_id)
            rec = self.ws.register_container(container, task.dataset_id, task.task_kind,
                                             note=f"continuous training: {len(ids)} feedback images after "
                                                  f"{cycle.alert.get('kind')}")
            cycle.dataset = rec.key
            self.ws.tasks.rebind(task_id, rec.dataset_id, rec.version)
            result = self.ws.develop(task_id, self.ct.k, self.ct.space)
            cycle.run_ids = result.run_ids
            cycle.A_after = _finite_or_none(self.ws.tasks.get(task_id).current_best_metric)
            dep = self.deploy(task_id, result.model.model_id)
            cycle.model_after = dep.model_id
            cycle.status = "succeeded"
        except Exception as exc:
            logger.exception("CT cycle %s failed", cycle.cycle_id)
            cycle.status, cycle.error = "failed", f"{type(exc).__name__}: {exc}"
        finally:
            cycle.finished_at = utc_now()
            with self._lock(task_id):
                self._log_cycle(cycle)
                self._ct_active.pop(task_id, None)
