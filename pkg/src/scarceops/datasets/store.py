"""Versioned, content-addressed image database with latent-space lookup.

Layout under ``root``::

    datasets/index.json                      every readable record
    datasets/<dataset_id>/v<k>/manifest.json container + fingerprint blobs
    datasets/<dataset_id>/v<k>/data.bin
    datasets/<dataset_id>/v<k>/labels.bin
    datasets/<dataset_id>/v<k>/fingerprints-<embedder>.npy

A version directory only becomes visible once the index names it, and the
index is swapped in with an atomic rename, so a crash at any point leaves
either the old state or the new one.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from filelock import FileLock

from ..embedder.fingerprint import DatasetEmbedding, Fingerprint, IncomparableFingerprintsError
from ..errors import NotFoundError, StorageError, ValidationError
from .container import ImageContainer, canonical_json
from .npy import read_npy, write_npy

NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,63}$")
TASK_KINDS = ("classification", "reconstruction")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def validate_name(name: str) -> str:
    if not isinstance(name, str) or not NAME_RE.match(name):
        raise ValidationError(f"invalid dataset name {name!r}: use letters, digits, '.', '_' or '-' (max 64)")
    return name


@dataclass
class DatasetRecord:
    dataset_id: str
    version: int
    content_hash: str
    name: str
    task_kind: str
    class_labels: list[str]
    class_distribution: dict[str, dict[str, int]]
    split_index: dict[str, list[int]]
    image_count: int
    created_at: str
    source_note: str = ""
    fingerprint_ref: Optional[dict] = None
    known_performances: list[dict] = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.dataset_id}@v{self.version}"

    @property
    def embedding(self) -> Optional[DatasetEmbedding]:
        if not self.fingerprint_ref:
            return None
        return DatasetEmbedding.from_dict(self.fingerprint_ref["embedding"])

    @property
    def embedder_version(self) -> Optional[str]:
        return self.fingerprint_ref["embedder_version"] if self.fingerprint_ref else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(**d)


@dataclass(frozen=True)
class ImageRef:
    dataset_id: str
    version: int
    index: int
    split: str
    distance: float

    @property
    def image_id(self) -> str:
        return f"{self.dataset_id}@v{self.version}#{self.index}"


def _rank_key(distance: float, rec: DatasetRecord) -> tuple:
    return (distance, rec.version, rec.dataset_id)


class DatasetStore:
    """The image database. Reads are lock-free; writes hold one lock per root."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.base = self.root / "datasets"
        self.base.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.base / ".lock"))
        self._fp_cache: dict[tuple[str, int], np.ndarray] = {}

    # fault-injection seam: tests replace this to simulate a crash mid-write
    def _checkpoint(self, step: str) -> None:
        pass

    # -- index

    @property
    def _index_path(self) -> Path:
        return self.base / "index.json"

    def _read_index(self) -> dict[str, dict]:
        try:
            raw = self._index_path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return {}
        try:
            return json.loads(raw)["records"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise StorageError(f"dataset index is corrupt: {exc}") from exc

    def _write_index(self, records: dict[str, dict]) -> None:
        tmp = self._index_path.with_name(f".index-{uuid.uuid4().hex}.tmp")
        try:
            tmp.write_bytes(canonical_json({"records": records}))
            self._checkpoint("index_tmp_written")
            os.replace(tmp, self._index_path)
        except OSError as exc:
            raise StorageError(f"cannot write dataset index: {exc}") from exc
        finally:
            if tmp.exists():
                tmp.unlink()

    def _version_dir(self, dataset_id: str, version: int) -> Path:
        return self.base / dataset_id / f"v{version}"

    # -- queries

    def list(self, dataset_id: Optional[str] = None, latest_only: bool = False) -> list[DatasetRecord]:
        recs = [DatasetRecord.from_dict(d) for d in self._read_index().values()]
        if dataset_id is not None:
            recs = [r for r in recs if r.dataset_id == dataset_id]
        recs.sort(key=lambda r: (r.dataset_id, r.version))
        if latest_only:
            latest = {r.dataset_id: r for r in recs}
            recs = list(latest.values())
        return recs

    def get(self, dataset_id: str, version: Optional[int] = None) -> DatasetRecord:
        versions = self.list(dataset_id)
        if not versions:
            raise NotFoundError(f"unknown dataset {dataset_id!r}")
        if version is None:
            return versions[-1]
        for r in versions:
            if r.version == version:
                return r
        raise NotFoundError(f"dataset {dataset_id!r} has no version {version}")

    def load_container(self, dataset_id: str, version: Optional[int] = None, verify: bool = True) -> ImageContainer:
        rec = self.get(dataset_id, version)
        container = ImageContainer.load(self._version_dir(rec.dataset_id, rec.version))
        if verify and container.content_hash() != rec.content_hash:
            raise StorageError(f"{rec.key}: stored blobs do not match content hash")
        return container

    # -- writes

    def register(
        self,
        container: ImageContainer,
        name: Optional[str] = None,
        task_kind: str = "classification",
        source_note: str = "",
    ) -> DatasetRecord:
        """Store ``container`` under ``name``; identical content returns the latest record."""
        name = validate_name(name or container.name)
        if task_kind not in TASK_KINDS:
            raise ValidationError(f"task_kind must be one of {TASK_KINDS}, got {task_kind!r}")
        try:
            container.validate()
        except ValidationError as exc:
            raise ValidationError(f"corrupt container: {exc}") from exc
        digest = container.content_hash()
        with self._lock:
            index = self._read_index()
            prior = sorted((DatasetRecord.from_dict(d) for d in index.values() if d["dataset_id"] == name),
                           key=lambda r: r.version)
            if prior and prior[-1].content_hash == digest:
                return prior[-1]
            version = prior[-1].version + 1 if prior else 1
            rec = DatasetRecord(
                dataset_id=name,
                version=version,
                content_hash=digest,
                name=name,
                task_kind=task_kind,
                class_labels=list(container.classes),
                class_distribution=container.class_distribution(),
                split_index={k: list(v) for k, v in container.splits.items()},
                image_count=container.count,
                created_at=utc_now(),
                source_note=source_note,
            )
            final = self._version_dir(name, version)
            tmp = final.parent / f".tmp-v{version}-{uuid.uuid4().hex}"
            try:
                if final.exists():  # left behind by a crash before indexing
                    shutil.rmtree(final)
                container.save(tmp)
                self._checkpoint("blobs_written")
                os.rename(tmp, final)
                self._checkpoint("blobs_renamed")
            except OSError as exc:
                shutil.rmtree(tmp, ignore_errors=True)
                raise StorageError(f"cannot write dataset blobs: {exc}") from exc
            index[rec.key] = rec.to_dict()
            self._write_index(index)
            return rec

    def _update(self, dataset_id: str, version: int, mutate) -> DatasetRecord:
        with self._lock:
            index = self._read_index()
            key = f"{dataset_id}@v{version}"
            if key not in index:
                raise NotFoundError(f"unknown dataset {key}")
            rec = DatasetRecord.from_dict(index[key])
            mutate(rec)
            index[key] = rec.to_dict()
            self._write_index(index)
            return rec

    def attach_fingerprints(
        self,
        dataset_id: str,
        version: int,
        fingerprints: Union[Sequence[Fingerprint], np.ndarray],
        embedding: DatasetEmbedding,
    ) -> DatasetRecord:
        """Store per-image codes and the dataset mean for one embedder version.

        A second call with another embedder replaces the active reference;
        every attachment stays listed in ``fingerprint_ref['history']``.
        """
        rec = self.get(dataset_id, version)
        if isinstance(fingerprints, np.ndarray):
            codes = np.asarray(fingerprints, dtype=np.float32)
        else:
            versions = {fp.embedder_version for fp in fingerprints}
            if versions - {embedding.embedder_version}:
                raise IncomparableFingerprintsError(
                    f"fingerprints from {sorted(versions)} do not match embedding {embedding.embedder_version}"
                )
            codes = np.array([fp.vector for fp in fingerprints], dtype=np.float32)
        if codes.ndim != 2 or codes.shape[0] != rec.image_count:
            raise ValidationError(f"{rec.key} holds {rec.image_count} images, got {codes.shape[0] if codes.ndim else 0} fingerprints")
        if codes.shape[1] != len(embedding.mean_vector):
            raise ValidationError("fingerprint width differs from embedding width")
        ver = embedding.embedder_version
        fname = f"fingerprints-{ver[:16]}.npy"
        path = self._version_dir(dataset_id, version) / fname
        tmp = path.with_name(f".{fname}.{uuid.uuid4().hex}.tmp")
        tmp.write_bytes(write_npy(codes))
        os.replace(tmp, path)

        def mutate(r: DatasetRecord) -> None:
            history = list((r.fingerprint_ref or {}).get("history", []))
            history.append({"embedder_version": ver, "file": fname, "attached_at": utc_now()})
            r.fingerprint_ref = {
                "embedder_version": ver,
                "file": fname,
                "embedding": embedding.to_dict(),
                "history": history,
            }

        return self._update(dataset_id, version, mutate)

    def add_known_performance(self, dataset_id: str, version: int, model_id: str, metric_name: str,
                              value: float) -> DatasetRecord:
        def mutate(r: DatasetRecord) -> None:
            perf = [p for p in r.known_performances if (p["model_id"], p["metric_name"]) != (model_id, metric_name)]
            perf.append({"model_id": model_id, "metric_name": metric_name, "value": float(value)})
            r.known_performances = perf

        return self._update(dataset_id, version, mutate)

    # -- latent lookup

    def fingerprints(self, rec: DatasetRecord) -> np.ndarray:
        if not rec.fingerprint_ref:
            raise NotFoundError(f"{rec.key} has no fingerprints")
        path = self._version_dir(rec.dataset_id, rec.version) / rec.fingerprint_ref["file"]
        stamp = path.stat().st_mtime_ns
        cached = self._fp_cache.get((str(path), stamp))
        if cached is None:
            cached = read_npy(path.read_bytes())
            self._fp_cache[(str(path), stamp)] = cached
        return cached

    def _comparable(self, embedder_version: str, latest_only: bool, exclude: Iterable[str]) -> list[DatasetRecord]:
        skip = set(exclude)
        return [r for r in self.list(latest_only=latest_only)
                if r.embedder_version == embedder_version and r.dataset_id not in skip]

    def nearest_datasets(self, query: DatasetEmbedding, k: int, latest_only: bool = False,
                         exclude: Iterable[str] = ()) -> list[tuple[DatasetRecord, float]]:
        if k < 0:
            raise ValidationError("k must be >= 0")
        q = np.asarray(query.mean_vector, dtype=np.float64)
        scored = []
        for rec in self._comparable(query.embedder_version, latest_only, exclude):
            d = float(np.sqrt(np.sum((np.asarray(rec.fingerprint_ref["embedding"]["mean_vector"]) - q) ** 2)))
            scored.append((rec, d))
        scored.sort(key=lambda t: _rank_key(t[1], t[0]))
        return scored[:k]

    def nearest_images(self, query: Union[Fingerprint, DatasetEmbedding], n: int, stratify: bool = False,
                       latest_only: bool = False, exclude: Iterable[str] = (),
                       classes: Optional[Iterable[str]] = None) -> list[ImageRef]:
        """The ``n`` stored images closest to ``query`` in latent space.

        With ``stratify`` the picks alternate across source datasets, visiting
        sources in order of their closest image, each in ascending distance.
        ``classes`` keeps only images whose class name is in the given set.
        """
        wanted = None if classes is None else set(classes)
        if n < 0:
            raise ValidationError("n must be >= 0")
        if isinstance(query, Fingerprint):
            q, ver = np.asarray(query.vector, dtype=np.float64), query.embedder_version
        else:
            q, ver = np.asarray(query.mean_vector, dtype=np.float64), query.embedder_version
        per_source: list[list[ImageRef]] = []
        for rec in self._comparable(ver, latest_only, exclude):
            codes = self.fingerprints(rec).astype(np.float64)
            dist = np.sqrt(np.sum((codes - q) ** 2, axis=1))
            split_of = np.empty(rec.image_count, dtype=object)
            for s, (a, b) in rec.split_index.items():
                split_of[a:b] = s
            order = np.lexsort((np.arange(len(dist)), dist))
            if wanted is not None:
                names = np.array(rec.class_labels, dtype=object)
                labels = self.load_container(rec.dataset_id, rec.version, verify=False).labels
                keep = np.isin(names[labels], list(wanted)) if len(labels) else np.zeros(0, bool)
                order = order[keep[order]]
            per_source.append([ImageRef(rec.dataset_id, rec.version, int(i), str(split_of[i]), float(dist[i]))
                               for i in order])
        if not stratify:
            flat = [ref for refs in per_source for ref in refs]
            flat.sort(key=lambda r: (r.distance, r.version, r.dataset_id, r.index))
            return flat[:n]
        per_source = [refs for refs in per_source if refs]
        per_source.sort(key=lambda refs: (refs[0].distance, refs[0].version, refs[0].dataset_id))
        out: list[ImageRef] = []
        depth = 0
        while len(out) < n and any(depth < len(refs) for refs in per_source):
            for refs in per_source:
                if depth < len(refs) and len(out) < n:
                    out.append(refs[depth])
            depth += 1
        return out

    def gather_images(self, refs: Sequence[ImageRef]) -> tuple[np.ndarray, list[str]]:
        """uint8 pixels [n,3,32,32] and class names for a list of image references."""
        pixels, names = [], []
        cache: dict[tuple[str, int], ImageContainer] = {}
        for ref in refs:
            key = (ref.dataset_id, ref.version)
            if key not in cache:
                cache[key] = self.load_container(*key, verify=False)
            c = cache[key]
            pixels.append(c.pixels[ref.index])
            names.append(c.classes[int(c.labels[ref.index])])
        if not pixels:
            return np.zeros((0, 3, 32, 32), dtype=np.uint8), []
        return np.stack(pixels), names
