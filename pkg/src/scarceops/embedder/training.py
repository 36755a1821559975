"""Minibatch Adam training of the autoencoder on reconstruction MSE."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..tensor import Adam, NonFiniteError, Tape, Tensor, backward, make_rng
from ..tensor import functional as F
from .autoencoder import IMAGE_SHAPE, Autoencoder, AutoencoderConfig

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_val_loss: Optional[float] = None
    best_epoch: int = 0
    best_val_loss: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "initial_val_loss": self.initial_val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }


def check_image_batch(images: np.ndarray, what: str = "images") -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or tuple(images.shape[1:]) != IMAGE_SHAPE:
        raise ValueError(f"{what} must have shape [N, 3, 32, 32], got {list(images.shape)}")
    images = images.astype(np.float32, copy=False)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError(f"{what} must be normalized to [0, 1]")
    return images


def reconstruction_loss(ae: Autoencoder, images: np.ndarray, batch_size: int = 64) -> float:
    """Mean squared reconstruction error in eval mode, weighted per sample."""
    if len(images) == 0:
        return math.nan
    was_training = ae.training
    ae.eval()
    try:
        total = 0.0
        for start in range(0, len(images), batch_size):
            batch = images[start : start + batch_size]
            x = Tensor(batch)
            total += F.mse_loss(ae(x), x).item() * len(batch)
    finally:
        ae.train(was_training)
    return total / len(images)


def shuffled_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    ae: Autoencoder,
    train_images: np.ndarray,
    val_images: Optional[np.ndarray] = None,
    config: Optional[AutoencoderConfig] = None,
) -> TrainingReport:
    """Fit ``ae`` in place and restore the parameters with the best validation loss.

    Without validation images the last epoch is kept.
    """
    config = config or ae.config
    train_images = check_image_batch(train_images, "train_images")
    if len(train_images) == 0:
        raise TrainingError("training set is empty")
    val_images = check_image_batch(val_images, "val_images") if val_images is not None and len(val_images) else None

    params = ae.parameters()
    opt = Adam(params, lr=config.learning_rate)
    shuffle_rng = make_rng(config.seed + 0x5EED)
    report = TrainingReport()
    if val_images is not None:
        report.initial_val_loss = reconstruction_loss(ae, val_images)
    best_state = ae.state_dict()
    best = math.inf

    for epoch in range(config.epochs):
        ae.train()
        running = 0.0
        for b, idx in enumerate(shuffled_batches(shuffle_rng, len(train_images), config.batch_size)):
            x = Tensor(train_images[idx])
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = F.mse_loss(ae(x), x)
                backward(loss, tape)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch + 1}, batch {b}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"NaN loss at epoch {epoch + 1}, batch {b}")
            opt.step()
            running += value * len(idx)
        report.train_loss.append(running / len(train_images))

        score = report.train_loss[-1]
        if val_images is not None:
            score = reconstruction_loss(ae, val_images)
            report.val_loss.append(score)
        if val_images is None or score < best:
            best = score
            report.best_epoch = epoch + 1
            best_state = ae.state_dict()
        logger.info("epoch %d/%d train=%.5f val=%s", epoch + 1, config.epochs, report.train_loss[-1],
                    f"{report.val_loss[-1]:.5f}" if report.val_loss else "-")

    ae.load_state_dict(best_state)
    report.best_val_loss = best if val_images is not None else None
    ae.eval()
    return report
