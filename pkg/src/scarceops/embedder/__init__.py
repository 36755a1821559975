"""Fingerprinting autoencoder: build, train, encode, compare."""

from .autoencoder import PRESETS, Autoencoder, AutoencoderConfig, Classifier, build
from .checkpoint import Checkpoint, autoencoder_from_checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .fingerprint import (
    DatasetEmbedding,
    Fingerprint,
    IncomparableFingerprintsError,
    dataset_embedding,
    embedder_version,
    encode_images,
    fingerprint_images,
    merge_embeddings,
    similarity,
)
from .training import TrainingError, TrainingReport, reconstruction_loss, train

__all__ = [
    "PRESETS",
    "Autoencoder",
    "AutoencoderConfig",
    "Classifier",
    "build",
    "train",
    "TrainingReport",
    "TrainingError",
    "reconstruction_loss",
    "Fingerprint",
    "DatasetEmbedding",
    "IncomparableFingerprintsError",
    "fingerprint_images",
    "encode_images",
    "dataset_embedding",
    "merge_embeddings",
    "similarity",
    "embedder_version",
    "Checkpoint",
    "autoencoder_from_checkpoint",
    "CheckpointError",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]
