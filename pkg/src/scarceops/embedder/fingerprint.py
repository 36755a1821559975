"""Per-image fingerprints, per-dataset mean embeddings and latent distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from ..tensor import Tensor
from .autoencoder import Autoencoder
from .checkpoint import encode_checkpoint
from .training import check_image_batch


class IncomparableFingerprintsError(ValueError):
    """Fingerprints produced by different embedder versions cannot be compared."""


@dataclass(frozen=True)
class Fingerprint:
    vector: tuple[float, ...]
    source_image_id: str
    embedder_version: str

    def __post_init__(self):
        if not self.embedder_version:
            raise ValueError("fingerprint needs an embedder_version")
        if not all(math.isfinite(v) for v in self.vector):
            raise ValueError("fingerprint vector must be finite")


@dataclass
class DatasetEmbedding:
    mean_vector: list[float]
    count: int
    embedder_version: str
    per_split: dict[str, list[float]] = field(default_factory=dict)
    per_split_count: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_vector": list(self.mean_vector),
            "count": self.count,
            "embedder_version": self.embedder_version,
            "per_split": {k: list(v) for k, v in self.per_split.items()},
            "per_split_count": dict(self.per_split_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetEmbedding":
        return cls(
            mean_vector=list(d["mean_vector"]),
            count=int(d["count"]),
            embedder_version=d["embedder_version"],
            per_split={k: list(v) for k, v in d.get("per_split", {}).items()},
            per_split_count={k: int(v) for k, v in d.get("per_split_count", {}).items()},
        )


def embedder_version(ae: Autoencoder) -> str:
    """Content hash of the checkpoint ``ae`` would be saved as."""
    _, digest = encode_checkpoint(ae.state_dict(), ae.config.preset, ae.config.to_dict())
    return digest


def encode_images(ae: Autoencoder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Latent codes [N, latent_dim] computed with the encoder in eval mode.

    Byte-identical images are encoded once so duplicates get identical codes
    regardless of where they sit in a batch. Module modes are restored
    afterwards and no tape is active, so nothing in ``ae`` changes.
    """
    images = check_image_batch(images)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(images) == 0:
        return np.zeros((0, ae.config.latent_dim), dtype=np.float32)
    seen: dict[bytes, int] = {}
    first: list[int] = []
    inverse = np.empty(len(images), dtype=np.int64)
    for i, img in enumerate(images):
        j = seen.setdefault(img.tobytes(), len(first))
        if j == len(first):
            first.append(i)
        inverse[i] = j
    unique = images[first]
    modes = [m.training for m in ae.modules()]
    ae.eval()
    try:
        out = [ae.encode(Tensor(unique[i : i + batch_size])).data for i in range(0, len(unique), batch_size)]
    finally:
        for m, mode in zip(ae.modules(), modes):
            m.training = mode
    return np.concatenate(out, axis=0)[inverse]


def fingerprint_images(
    ae: Autoencoder,
    images: np.ndarray,
    version: Optional[str] = None,
    image_ids: Optional[Sequence[str]] = None,
    batch_size: int = 64,
) -> list[Fingerprint]:
    version = version or embedder_version(ae)
    codes = encode_images(ae, images, batch_size)
    ids = image_ids if image_ids is not None else [str(i) for i in range(len(codes))]
    if len(ids) != len(codes):
        raise ValueError(f"{len(ids)} image ids for {len(codes)} images")
    return [Fingerprint(tuple(float(v) for v in row), str(i), version) for row, i in zip(codes, ids)]


def dataset_embedding(
    fingerprints: Sequence[Union[Fingerprint, Sequence[float]]],
    splits: Optional[Sequence[str]] = None,
    version: Optional[str] = None,
) -> DatasetEmbedding:
    """Arithmetic mean of fingerprints, overall and per split label."""
    if not fingerprints:
        raise ValueError("cannot embed an empty fingerprint set")
    if isinstance(fingerprints[0], Fingerprint):
        versions = {fp.embedder_version for fp in fingerprints}
        if len(versions) != 1:
            raise IncomparableFingerprintsError(f"mixed embedder versions: {sorted(versions)}")
        version = versions.pop()
        vectors = np.array([fp.vector for fp in fingerprints], dtype=np.float64)
    else:
        if not version:
            raise ValueError("raw vectors need an explicit embedder version")
        vectors = np.asarray(fingerprints, dtype=np.float64)
    emb = DatasetEmbedding(vectors.mean(axis=0).tolist(), len(vectors), version)
    if splits is not None:
        if len(splits) != len(vectors):
            raise ValueError("one split label per fingerprint is required")
        labels = np.asarray(splits)
        for name in dict.fromkeys(splits):
            sel = vectors[labels == name]
            emb.per_split[name] = sel.mean(axis=0).tolist()
            emb.per_split_count[name] = int(len(sel))
    return emb


def _vector_and_version(x) -> tuple[np.ndarray, str]:
    if isinstance(x, Fingerprint):
        return np.asarray(x.vector, dtype=np.float64), x.embedder_version
    if isinstance(x, DatasetEmbedding):
        return np.asarray(x.mean_vector, dtype=np.float64), x.embedder_version
    raise TypeError(f"cannot measure distance for {type(x).__name__}")


def similarity(a, b) -> float:
    """Euclidean distance between two fingerprints or dataset embeddings."""
    va, ver_a = _vector_and_version(a)
    vb, ver_b = _vector_and_version(b)
    if ver_a != ver_b:
        raise IncomparableFingerprintsError(f"embedder versions differ: {ver_a[:12]} vs {ver_b[:12]}")
    if va.shape != vb.shape:
        raise ValueError(f"latent dimensions differ: {va.shape} vs {vb.shape}")
    return float(np.sqrt(np.sum((va - vb) ** 2)))


def merge_embeddings(parts: Iterable[DatasetEmbedding]) -> DatasetEmbedding:
    """Count-weighted mean of embeddings that share an embedder version."""
    parts = list(parts)
    versions = {p.embedder_version for p in parts}
    if len(versions) != 1:
        raise IncomparableFingerprintsError(f"mixed embedder versions: {sorted(versions)}")
    total = sum(p.count for p in parts)
    mean = np.sum([np.asarray(p.mean_vector) * p.count for p in parts], axis=0) / total
    return DatasetEmbedding(mean.tolist(), total, versions.pop())
