"""One store root with every registry attached; shared by the CLI and the HTTP service."""

from __future__ import annotations

import json
import logging
import os
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .automl import DevelopResult, Developer, SearchSpace
from .datasets import DatasetRecord, DatasetStore, ImageContainer, import_npz
from .datasets.store import utc_now
from .embedder import (
    Autoencoder,
    AutoencoderConfig,
    TrainingReport,
    autoencoder_from_checkpoint,
    build,
    dataset_embedding,
    embedder_version,
    encode_images,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .errors import NotFoundError, ValidationError
from .models import ModelRecord, ModelStore, RunRecord
from .strategy import StrategyConfig, TaskSpec, TaskStore

logger = logging.getLogger(__name__)

ENV_STORE = "SCARCEOPS_STORE"


def resolve_root(root: Optional[Union[str, Path]]) -> Path:
    root = root or os.environ.get(ENV_STORE)
    if not root:
        raise ValidationError(f"no store root: pass --store or set {ENV_STORE}")
    return Path(root)


@dataclass
class EmbedderInfo:
    version: str
    preset: str
    latent_dim: int
    created_at: str
    trained_on: list[str]
    report: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Workspace:
    def __init__(self, root: Union[str, Path], strategy: Optional[StrategyConfig] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.datasets = DatasetStore(self.root)
        self.models = ModelStore(self.root)
        self.tasks = TaskStore(self.root)
        self.strategy = strategy or StrategyConfig()
        self.embedder_dir = self.root / "embedders"
        self.embedder_dir.mkdir(exist_ok=True)
        self._ae_cache: dict[str, Autoencoder] = {}
        self._ae_lock = threading.Lock()

    # -- datasets

    def import_dataset(
        self,
        path: Union[str, Path, bytes],
        name: str,
        task_kind: str = "classification",
        split_naming: Optional[Mapping[str, str]] = None,
        resize: bool = False,
        ignore_labels: bool = False,
        fingerprint: bool = True,
    ) -> DatasetRecord:
        """Import an NPZ archive, register it and fingerprint it with the current embedder if any."""
        container = import_npz(path, name=name, split_naming=split_naming, resize=resize,
                               ignore_labels=ignore_labels)
        note = f"imported from {Path(path).name}" if not isinstance(path, (bytes, bytearray)) else "uploaded archive"
        rec = self.datasets.register(container, name, task_kind, source_note=note)
        if fingerprint and self.current_embedder_info() is not None and rec.fingerprint_ref is None:
            rec = self.fingerprint(rec.dataset_id, rec.version)
        return rec

    def register_container(self, container: ImageContainer, name: str, task_kind: str, note: str = "",
                           fingerprint: bool = True) -> DatasetRecord:
        rec = self.datasets.register(container, name, task_kind, source_note=note)
        if fingerprint and self.current_embedder_info() is not None:
            info = self.current_embedder_info()
            if rec.embedder_version != info.version:
                rec = self.fingerprint(rec.dataset_id, rec.version)
        return rec

    # -- embedders

    @property
    def _current_path(self) -> Path:
        return self.embedder_dir / "current.json"

    def embedder_infos(self) -> list[EmbedderInfo]:
        out = []
        for p in sorted(self.embedder_dir.glob("*.json")):
            if p.name != "current.json":
                out.append(EmbedderInfo(**json.loads(p.read_text(encoding="utf-8"))))
        return out

    def current_embedder_info(self) -> Optional[EmbedderInfo]:
        try:
            version = json.loads(self._current_path.read_text(encoding="utf-8"))["version"]
        except FileNotFoundError:
            return None
        return EmbedderInfo(**json.loads((self.embedder_dir / f"{version}.json").read_text(encoding="utf-8")))

    def require_embedder(self) -> EmbedderInfo:
        info = self.current_embedder_info()
        if info is None:
            raise NotFoundError("no embedder checkpoint: run 'embedder train' first")
        return info

    def load_embedder(self, version: Optional[str] = None) -> Autoencoder:
        version = version or self.require_embedder().version
        with self._ae_lock:
            ae = self._ae_cache.get(version)
            if ae is None:
                path = self.embedder_dir / f"{version}.ckpt"
                if not path.exists():
                    raise NotFoundError(f"missing embedder checkpoint {version[:12]}")
                ae = autoencoder_from_checkpoint(load_checkpoint(path))
                self._ae_cache[version] = ae
            return ae

    def save_embedder(self, ae: Autoencoder, trained_on: Sequence[str], report: Optional[TrainingReport] = None,
                      make_current: bool = True) -> EmbedderInfo:
        digest = save_checkpoint(self.embedder_dir / ".incoming.ckpt", ae.state_dict(), ae.config.preset,
                                 ae.config.to_dict())
        os.replace(self.embedder_dir / ".incoming.ckpt", self.embedder_dir / f"{digest}.ckpt")
        info = EmbedderInfo(digest, ae.config.preset, ae.config.latent_dim, utc_now(), list(trained_on),
                            report.to_dict() if report else {})
        meta = self.embedder_dir / f"{digest}.json"
        tmp = meta.with_name(f".{uuid.uuid4().hex}.tmp")
        tmp.write_text(json.dumps(info.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
        os.replace(tmp, meta)
        if make_current:
            tmp = self._current_path.with_name(f".{uuid.uuid4().hex}.tmp")
            tmp.write_text(json.dumps({"version": digest}), encoding="utf-8")
            os.replace(tmp, self._current_path)
        with self._ae_lock:
            self._ae_cache[digest] = ae
        return info

    def train_embedder(self, config: Optional[AutoencoderConfig] = None,
                       dataset_ids: Optional[Sequence[str]] = None,
                       refingerprint: bool = True) -> tuple[EmbedderInfo, TrainingReport]:
        """Fit a new autoencoder on the train splits of the chosen datasets (all by default)."""
        config = config or AutoencoderConfig()
        recs = self.datasets.list(latest_only=True)
        if dataset_ids:
            recs = [self.datasets.get(d) for d in dataset_ids]
        if not recs:
            raise ValidationError("no datasets registered to train an embedder on")
        tr, va = [], []
        for rec in recs:
            c = self.datasets.load_container(rec.dataset_id, rec.version)
            tr.append(c.images("train") if c.splits.get("train", (0, 0))[1] > c.splits.get("train", (0, 0))[0]
                      else c.images())
            if "val" in c.splits:
                va.append(c.images("val"))
        train_x = np.concatenate(tr)
        val_x = np.concatenate(va) if va else None
        ae = build(config)
        report = train(ae, train_x, val_x, config)
        info = self.save_embedder(ae, [r.key for r in recs], report)
        if refingerprint:
            self.fingerprint_all()
        return info, report

    # -- fingerprints

    def fingerprint(self, dataset_id: str, version: Optional[int] = None,
                    embedder: Optional[str] = None) -> DatasetRecord:
        ae = self.load_embedder(embedder)
        ver = embedder or self.require_embedder().version
        rec = self.datasets.get(dataset_id, version)
        c = self.datasets.load_container(rec.dataset_id, rec.version)
        codes = encode_images(ae, c.images()) if c.count else np.zeros((0, ae.config.latent_dim))
        if not len(codes):
            raise ValidationError(f"{rec.key} has no images to fingerprint")
        emb = dataset_embedding(codes.astype(np.float64).tolist(), splits=c.split_of(), version=ver)
        return self.datasets.attach_fingerprints(rec.dataset_id, rec.version, codes, emb)

    def fingerprint_all(self) -> list[DatasetRecord]:
        info = self.require_embedder()
        out = []
        for rec in self.datasets.list():
            if rec.embedder_version != info.version and rec.image_count:
                out.append(self.fingerprint(rec.dataset_id, rec.version))
        return out

    def encode(self, images: np.ndarray, embedder: Optional[str] = None) -> np.ndarray:
        return encode_images(self.load_embedder(embedder), images)

    def similar(self, dataset_id: str, k: int = 5, version: Optional[int] = None) -> list[tuple[DatasetRecord, float]]:
        """Closest other datasets in latent space (the query's own versions excluded)."""
        rec = self.datasets.get(dataset_id, version)
        if rec.embedding is None:
            raise ValidationError(f"{rec.key} has no fingerprints; run 'embedder fingerprint'")
        return self.datasets.nearest_datasets(rec.embedding, k, exclude=[rec.dataset_id])

    # -- tasks and development

    def create_task(self, dataset_id: str, version: Optional[int], metric: str, task_kind: str) -> TaskSpec:
        rec = self.datasets.get(dataset_id, version)
        return self.tasks.create(rec.dataset_id, rec.version, metric, task_kind)

    def developer(self) -> Developer:
        return Developer(self.datasets, self.models, self.tasks, self.strategy)

    def develop(self, task_id: str, k: int = 1, space: Optional[SearchSpace] = None,
                use_fingerprints: Optional[bool] = None) -> DevelopResult:
        return self.developer().develop(task_id, k, space, use_fingerprints)

    def best(self, task_id: str) -> tuple[ModelRecord, RunRecord]:
        self.tasks.get(task_id)
        run = self.models.best_run(task_id)
        return self.models.get_model(run.model_id), run
