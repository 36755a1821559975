"""Canonical image container: uint8 [N, 3, 32, 32] pixels plus uint16 labels."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from ..errors import ValidationError
from .npy import NpyFormatError, read_npz, write_npz

SIDE = 32
CHANNELS = 3
SPLITS = ("train", "val", "test")
UNLABELED = "unlabeled"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass
class ImageContainer:
    name: str
    pixels: np.ndarray  # uint8 [N, 3, 32, 32]
    labels: np.ndarray  # uint16 [N]
    splits: dict[str, tuple[int, int]] = field(default_factory=dict)
    classes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        self.splits = {k: (int(a), int(b)) for k, (a, b) in self.splits.items()}
        self.validate()

    @property
    def count(self) -> int:
        return int(self.pixels.shape[0])

    def validate(self) -> None:
        n = self.pixels.shape[0] if self.pixels.ndim else 0
        if self.pixels.shape != (n, CHANNELS, SIDE, SIDE):
            raise ValidationError(f"pixels must have shape [N, 3, 32, 32], got {list(self.pixels.shape)}")
        if self.labels.shape != (n,):
            raise ValidationError(f"expected {n} labels, got shape {list(self.labels.shape)}")
        if not self.classes:
            raise ValidationError("container needs at least one class")
        if n and int(self.labels.max()) >= len(self.classes):
            raise ValidationError(f"label {int(self.labels.max())} out of range for {len(self.classes)} classes")
        pos = 0
        for split, (a, b) in self.splits.items():
            if a != pos or b < a:
                raise ValidationError(f"split {split!r} range [{a}, {b}) must continue at {pos}")
            pos = b
        if pos != n:
            raise ValidationError(f"splits cover {pos} images, container holds {n}")

    def split_slice(self, split: str) -> slice:
        a, b = self.splits.get(split, (0, 0))
        return slice(a, b)

    def images(self, split: Optional[str] = None) -> np.ndarray:
        """Pixels as float32 in [0, 1], optionally restricted to one split."""
        px = self.pixels if split is None else self.pixels[self.split_slice(split)]
        return px.astype(np.float32) / 255.0

    def split_of(self) -> list[str]:
        out = [""] * self.count
        for split, (a, b) in self.splits.items():
            out[a:b] = [split] * (b - a)
        return out

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "shape": [self.count, CHANNELS, SIDE, SIDE],
            "dtype": "u8",
            "label_dtype": "u16",
            "splits": {k: list(v) for k, v in self.splits.items()},
            "split_order": list(self.splits),
            "classes": list(self.classes),
        }

    def content_hash(self) -> str:
        """SHA-256 over shape + split index + pixel bytes + label bytes."""
        head = canonical_json({
            "shape": [self.count, CHANNELS, SIDE, SIDE],
            "splits": [[k, a, b] for k, (a, b) in self.splits.items()],
        })
        h = hashlib.sha256(head)
        h.update(self.pixels.tobytes())
        h.update(self.labels.astype("<u2").tobytes())
        return h.hexdigest()

    def class_distribution(self) -> dict[str, dict[str, int]]:
        out = {}
        for split, (a, b) in self.splits.items():
            counts = np.bincount(self.labels[a:b], minlength=len(self.classes))
            out[split] = {self.classes[i]: int(c) for i, c in enumerate(counts)}
        return out

    # -- on-disk layout: manifest.json, data.bin, labels.bin

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "data.bin").write_bytes(self.pixels.tobytes())
        (directory / "labels.bin").write_bytes(self.labels.astype("<u2").tobytes())
        (directory / "manifest.json").write_bytes(canonical_json(self.manifest()))
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ImageContainer":
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
            pixels = np.frombuffer((directory / "data.bin").read_bytes(), dtype=np.uint8)
            labels = np.frombuffer((directory / "labels.bin").read_bytes(), dtype="<u2")
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"corrupt container at {directory}: {exc}") from exc
        return cls.from_parts(manifest, pixels, labels)

    @classmethod
    def from_parts(cls, manifest: dict, pixels: np.ndarray, labels: np.ndarray) -> "ImageContainer":
        shape = manifest.get("shape")
        if not shape or len(shape) != 4 or pixels.size != int(np.prod(shape)):
            raise ValidationError(f"pixel blob holds {pixels.size} bytes, manifest shape {shape}")
        order = manifest.get("split_order") or list(manifest.get("splits", {}))
        splits = {k: tuple(manifest["splits"][k]) for k in order}
        return cls(manifest["name"], pixels.reshape(shape), labels.astype(np.uint16), splits, list(manifest["classes"]))


def _to_chw(images: np.ndarray, key: str, resize: bool) -> np.ndarray:
    if images.dtype != np.uint8:
        raise ValidationError(f"{key}: images must be uint8, got {images.dtype}")
    if images.ndim == 3:
        images = np.repeat(images[:, None, :, :], CHANNELS, axis=1)
    elif images.ndim == 4 and images.shape[3] == CHANNELS:
        images = images.transpose(0, 3, 1, 2)
    else:
        raise ValidationError(f"{key}: expected [N,H,W] or [N,H,W,3], got {list(images.shape)}")
    h, w = images.shape[2:]
    if (h, w) != (SIDE, SIDE):
        if not resize:
            raise ValidationError(f"{key}: images are {h}x{w}; pass resize=True to resample to 32x32")
        rows = (np.arange(SIDE) * h) // SIDE
        cols = (np.arange(SIDE) * w) // SIDE
        images = images[:, :, rows][:, :, :, cols]
    return np.ascontiguousarray(images)


def _labels(arr: np.ndarray, key: str, n: int, ignore_labels: bool) -> np.ndarray:
    if ignore_labels:
        return np.zeros(n, dtype=np.int64)
    if arr.dtype.kind not in "ui":
        raise ValidationError(f"{key}: labels must be integers, got {arr.dtype}")
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValidationError(f"{key}: multi-label arrays {list(arr.shape)} unsupported; use ignore_labels")
    if arr.shape[0] != n:
        raise ValidationError(f"{key}: {arr.shape[0]} labels for {n} images")
    if n and (arr.min() < 0 or arr.max() > 0xFFFE):
        raise ValidationError(f"{key}: labels must lie in [0, 65534]")
    return arr.astype(np.int64)


def import_npz(
    path: Union[str, Path, bytes],
    name: Optional[str] = None,
    split_naming: Optional[Mapping[str, str]] = None,
    resize: bool = False,
    ignore_labels: bool = False,
    classes: Optional[list[str]] = None,
) -> ImageContainer:
    """Build a container from an NPZ of ``<prefix>_images`` / ``<prefix>_labels`` arrays.

    ``split_naming`` maps our split names to the archive prefixes; every
    mapped split must be present. Gray images are replicated to three
    channels, channel-last images are transposed.
    """
    split_naming = dict(split_naming or {s: s for s in SPLITS})
    arrays = read_npz(path)
    pix, labs, splits = [], [], {}
    pos = 0
    for split, prefix in split_naming.items():
        ikey, lkey = f"{prefix}_images", f"{prefix}_labels"
        missing = [k for k in (ikey, lkey) if k not in arrays and not (k == lkey and ignore_labels)]
        if missing:
            raise ValidationError(f"missing split keys {missing} (archive has {sorted(arrays)})")
        imgs = _to_chw(arrays[ikey], ikey, resize)
        pix.append(imgs)
        labs.append(_labels(arrays.get(lkey), lkey, len(imgs), ignore_labels))
        splits[split] = (pos, pos + len(imgs))
        pos += len(imgs)
    pixels = np.concatenate(pix) if pix else np.zeros((0, CHANNELS, SIDE, SIDE), np.uint8)
    labels = np.concatenate(labs) if labs else np.zeros(0, np.int64)
    if classes is None:
        if ignore_labels:
            classes = [UNLABELED]
        else:
            k = int(labels.max()) + 1 if labels.size else 1
            classes = [str(i) for i in range(k)]
    if name is None:
        name = Path(path).stem if not isinstance(path, (bytes, bytearray)) else "dataset"
    return ImageContainer(name, pixels, labels, splits, classes)


def export_npz(container: ImageContainer, path: Union[str, Path], compress: bool = False) -> Path:
    """Write the container back as ``<split>_images`` [n,32,32,3] + ``<split>_labels`` [n,1]."""
    arrays = {}
    for split, (a, b) in container.splits.items():
        arrays[f"{split}_images"] = container.pixels[a:b].transpose(0, 2, 3, 1)
        arrays[f"{split}_labels"] = container.labels[a:b].astype("<u2").reshape(-1, 1)
    return write_npz(path, arrays, compress=compress)


__all__ = ["ImageContainer", "import_npz", "export_npz", "NpyFormatError", "UNLABELED", "SPLITS"]
