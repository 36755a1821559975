"""Synthetic 32x32 image families with distinct pixel statistics.

Used for desk-scale experiments, demos and tests where real microscopy data
is not available. Images are uint8 in [N, 32, 32, 3] layout (gray families
in [N, 32, 32]) so they look like what the NPZ importer expects.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

FAMILIES = ("blobs", "stripes", "noise")
SIZE = 32


def _blobs(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    imgs = np.empty((n, SIZE, SIZE, 3), dtype=np.uint8)
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        canvas = np.full((SIZE, SIZE), 150.0)
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(4, SIZE - 4, size=2)
            r = rng.uniform(3, 7) * (1.4 if labels[i] else 1.0)
            canvas += 100.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        canvas += rng.normal(0, 6, size=canvas.shape)
        tint = np.array([1.0, 0.85, 0.95])
        imgs[i] = np.clip(canvas[..., None] * tint, 0, 255).astype(np.uint8)
    return imgs, labels


def _stripes(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    imgs = np.empty((n, SIZE, SIZE), dtype=np.uint8)
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        period = rng.uniform(4, 8)
        phase = rng.uniform(0, 2 * np.pi)
        coord = xx if labels[i] else yy
        canvas = 40 + 30 * np.sin(2 * np.pi * coord / period + phase) + rng.normal(0, 5, size=(SIZE, SIZE))
        imgs[i] = np.clip(canvas, 0, 255).astype(np.uint8)
    return imgs, labels


def _noise(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, 2, size=n)
    imgs = np.empty((n, SIZE, SIZE, 3), dtype=np.uint8)
    for i in range(n):
        lo = 60 if labels[i] else 90
        imgs[i] = rng.integers(lo, lo + 110, size=(SIZE, SIZE, 3), dtype=np.uint8)
    return imgs, labels


_MAKERS = {"blobs": _blobs, "stripes": _stripes, "noise": _noise}


def make_family(kind: str, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(images_u8, labels)`` for ``n`` images of one family."""
    if kind not in _MAKERS:
        raise ValueError(f"unknown family {kind!r}; choose from {FAMILIES}")
    return _MAKERS[kind](np.random.default_rng(seed), n)


def to_chw_float(images: np.ndarray) -> np.ndarray:
    """uint8 [N,H,W] or [N,H,W,3] -> float32 [N,3,H,W] in [0, 1]."""
    if images.ndim == 3:
        images = np.repeat(images[:, None], 3, axis=1)
    else:
        images = images.transpose(0, 3, 1, 2)
    return images.astype(np.float32) / 255.0


def write_npz(path: Path, kind: str, n_train: int, n_val: int, n_test: int, seed: int = 0,
              brightness_shift: Optional[int] = None) -> Path:
    """Write a MedMNIST-style NPZ with train/val/test image and label arrays."""
    arrays = {}
    for offset, (split, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        imgs, labels = make_family(kind, n, seed * 1000 + offset)
        if brightness_shift:
            imgs = np.clip(imgs.astype(np.int16) + brightness_shift, 0, 255).astype(np.uint8)
        arrays[f"{split}_images"] = imgs
        arrays[f"{split}_labels"] = labels.astype(np.uint8).reshape(-1, 1)
    path = Path(path)
    np.savez_compressed(path, **arrays)
    return path
