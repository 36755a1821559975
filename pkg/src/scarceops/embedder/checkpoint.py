"""Checkpoint file format.

A checkpoint is a single file::

    <u64 little-endian manifest length> <manifest JSON, UTF-8> <tensor blob>

The blob concatenates every tensor as little-endian float32 in row-major
order. The manifest indexes tensors by name with shape and byte offset and
carries ``content_hash`` = SHA-256 over the canonical manifest bytes (without
the hash field itself) followed by the blob.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Raised for malformed or corrupted checkpoint files."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def content_hash(self) -> str:
        return self.manifest["content_hash"]

    @property
    def preset(self) -> str:
        return self.manifest["preset"]

    @property
    def config(self) -> dict:
        return self.manifest["config"]


def encode_checkpoint(tensors: Mapping[str, np.ndarray], preset: str, config: dict) -> tuple[bytes, str]:
    """Serialize named tensors; return ``(file_bytes, content_hash)``."""
    index = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, "preset": preset, "config": config, "tensors": index}
    digest = hashlib.sha256(canonical_json(manifest) + blob).hexdigest()
    manifest["content_hash"] = digest
    head = canonical_json(manifest)
    return _LEN.pack(len(head)) + head + blob, digest


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _LEN.size:
        raise CheckpointError("checkpoint truncated before manifest length")
    (mlen,) = _LEN.unpack_from(data)
    if _LEN.size + mlen > len(data):
        raise CheckpointError("checkpoint truncated inside manifest")
    try:
        manifest = json.loads(data[_LEN.size : _LEN.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint manifest unreadable: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    blob = data[_LEN.size + mlen :]
    claimed = manifest.pop("content_hash", None)
    actual = hashlib.sha256(canonical_json(manifest) + blob).hexdigest()
    if claimed != actual:
        raise CheckpointError(f"checkpoint hash mismatch: manifest says {claimed}, content hashes to {actual}")
    manifest["content_hash"] = claimed
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise CheckpointError(f"tensor {entry['name']!r} runs past end of blob")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(manifest, tensors)


def save_checkpoint(path: os.PathLike, tensors: Mapping[str, np.ndarray], preset: str, config: dict) -> str:
    data, digest = encode_checkpoint(tensors, preset, config)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return digest


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def autoencoder_from_checkpoint(ck: Checkpoint):
    """Rebuild the autoencoder a checkpoint was saved from."""
    from .autoencoder import AutoencoderConfig, build

    ae = build(AutoencoderConfig(**ck.config))
    ae.load_state_dict(ck.tensors)
    ae.eval()
    return ae
