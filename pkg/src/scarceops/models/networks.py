"""Task networks: construction from descriptors, training, inference, scoring.

Classification tasks use a trunk + linear head with sigmoid outputs fitted to
one-hot targets under MSE. Reconstruction tasks use the autoencoder itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..embedder.autoencoder import Autoencoder, AutoencoderConfig, Classifier, build
from ..embedder.checkpoint import Checkpoint, encode_checkpoint
from ..embedder.training import check_image_batch, shuffled_batches
from ..errors import ValidationError
from ..tensor import Adam, Module, NonFiniteError, Tape, Tensor, backward, make_rng
from ..tensor import functional as F
from .metrics import check_metric, score


class TrialFailure(RuntimeError):
    """A training or evaluation attempt that should be recorded as a failed run."""


def descriptor_for(task_kind: str, preset: str, num_classes: int, latent_dim: int = 2) -> dict:
    if task_kind == "classification":
        return {"kind": "classifier", "preset": preset, "num_classes": int(num_classes)}
    if task_kind == "reconstruction":
        return {"kind": "autoencoder", "preset": preset, "latent_dim": int(latent_dim)}
    raise ValidationError(f"unknown task kind {task_kind!r}")


def build_network(descriptor: dict, seed: int = 0) -> Module:
    kind = descriptor.get("kind")
    if kind == "classifier":
        return Classifier(descriptor["preset"], descriptor["num_classes"], seed=seed)
    if kind == "autoencoder":
        return build(AutoencoderConfig(preset=descriptor["preset"], latent_dim=descriptor["latent_dim"], seed=seed))
    raise ValidationError(f"unknown architecture descriptor {descriptor!r}")


def encode_network(model: Module, descriptor: dict) -> tuple[bytes, str]:
    return encode_checkpoint(model.state_dict(), descriptor["preset"], descriptor)


def network_from_checkpoint(ck: Checkpoint) -> Module:
    model = build_network(ck.config)
    model.load_state_dict(ck.tensors)
    model.eval()
    return model


def compatible(descriptor: dict, task_kind: str, num_classes: int) -> Optional[str]:
    """None when ``descriptor`` can serve the task as is, otherwise the reason it cannot."""
    want = "classifier" if task_kind == "classification" else "autoencoder"
    if descriptor.get("kind") != want:
        return f"model kind {descriptor.get('kind')!r} cannot serve a {task_kind} task"
    if want == "classifier" and descriptor["num_classes"] != num_classes:
        return f"incompatible head: model has {descriptor['num_classes']} classes, task has {num_classes}"
    return None


def _trunk_prefix(descriptor: dict) -> str:
    return "trunk." if descriptor["kind"] == "classifier" else "encoder.trunk."


def warm_start(model: Module, descriptor: dict, source: Checkpoint) -> list[str]:
    """Copy the shared trunk (and head when shapes agree) from ``source`` into ``model``."""
    src_desc = source.config
    if src_desc.get("preset") != descriptor["preset"]:
        raise TrialFailure(f"source preset {src_desc.get('preset')!r} differs from {descriptor['preset']!r}")
    src_prefix, dst_prefix = _trunk_prefix(src_desc), _trunk_prefix(descriptor)
    mapped = {}
    for name, arr in source.tensors.items():
        if name.startswith(src_prefix):
            mapped[dst_prefix + name[len(src_prefix):]] = arr
        elif src_desc["kind"] == descriptor["kind"]:
            mapped[name] = arr
    loaded = model.load_state_dict(mapped, strict=False)
    if not any(n.startswith(dst_prefix) for n in loaded):
        raise TrialFailure("source checkpoint shares no trunk parameters with the target network")
    return loaded


def _targets(model: Module, x: np.ndarray, labels: Optional[np.ndarray]) -> np.ndarray:
    if isinstance(model, Classifier):
        onehot = np.zeros((len(x), model.num_classes), dtype=np.float32)
        onehot[np.arange(len(x)), labels] = 1.0
        return onehot
    return x


@dataclass
class FitConfig:
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int = 0


def fit(
    model: Module,
    images: np.ndarray,
    labels: Optional[np.ndarray],
    cfg: FitConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> list[float]:
    """Minibatch Adam on MSE; returns the mean training loss per epoch."""
    images = check_image_batch(images)
    if len(images) == 0:
        raise TrialFailure("no training images")
    if isinstance(model, Classifier):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (len(images),):
            raise TrialFailure("classifier training needs one label per image")
        if labels.size and labels.max() >= model.num_classes:
            raise TrialFailure(f"label {labels.max()} exceeds head width {model.num_classes}")
    targets = _targets(model, images, labels)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = make_rng(cfg.seed + 0x5EED)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for b, idx in enumerate(shuffled_batches(rng, len(images), cfg.batch_size)):
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = F.mse_loss(model(Tensor(images[idx])), Tensor(targets[idx]))
                backward(loss, tape)
            except NonFiniteError as exc:
                raise TrialFailure(f"non-finite values at epoch {epoch + 1}, batch {b}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrialFailure(f"NaN loss at epoch {epoch + 1}, batch {b}")
            opt.step()
            total += value * len(idx)
        history.append(total / len(images))
        if on_epoch:
            on_epoch(epoch + 1, history[-1])
    model.eval()
    return history


def infer(model: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode outputs: class scores [N, C] or reconstructions [N, 3, 32, 32]."""
    images = check_image_batch(images)
    modes = [m.training for m in model.modules()]
    model.eval()
    try:
        outs = [model(Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
    finally:
        for m, mode in zip(model.modules(), modes):
            m.training = mode
    if not outs:
        return np.zeros((0,), dtype=np.float32)
    return np.concatenate(outs)


def predict_labels(model: Classifier, images: np.ndarray) -> np.ndarray:
    return np.argmax(infer(model, images), axis=1)


def evaluate(model: Module, metric_name: str, task_kind: str, images: np.ndarray,
             labels: Optional[np.ndarray] = None) -> float:
    """Metric of ``model`` on the given images, higher is better."""
    check_metric(metric_name, task_kind)
    if task_kind == "classification":
        if not isinstance(model, Classifier):
            raise ValidationError("classification metrics need a classifier")
        return score(metric_name, labels, predict_labels(model, images))
    if not isinstance(model, Autoencoder):
        raise ValidationError("reconstruction metrics need an autoencoder")
    return score(metric_name, images, infer(model, images))


def evaluation_split(splits: dict) -> str:
    """Held-out split used to score models: val, else test, else train."""
    for name in ("val", "test", "train"):
        a, b = splits.get(name, (0, 0))
        if b > a:
            return name
    raise ValidationError("dataset has no images to evaluate on")
