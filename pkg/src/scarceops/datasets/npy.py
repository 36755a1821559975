"""Reader and writer for the NPY array format and NPZ archives of it.

Only what image datasets need: C-ordered arrays of fixed-size integer or
float dtypes, format versions 1.0 and 2.0.
"""

from __future__ import annotations

import ast
import io
import struct
import zipfile
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from ..errors import ValidationError

MAGIC = b"\x93NUMPY"

_KINDS = {"u": "unsigned", "i": "signed", "f": "float", "b": "bool"}
_SIZES = {"u": (1, 2, 4, 8), "i": (1, 2, 4, 8), "f": (4, 8), "b": (1,)}


class NpyFormatError(ValidationError):
    code = "bad_npy"


class UnsupportedLayoutError(NpyFormatError):
    code = "unsupported_layout"


def _parse_descr(descr: str) -> np.dtype:
    if not isinstance(descr, str) or len(descr) < 2:
        raise NpyFormatError(f"unknown dtype descriptor {descr!r}")
    order = descr[0] if descr[0] in "<>|=" else "|"
    body = descr[1:] if descr[0] in "<>|=" else descr
    kind, size = body[0], body[1:]
    if kind not in _KINDS or not size.isdigit() or int(size) not in _SIZES[kind]:
        raise NpyFormatError(f"unknown dtype descriptor {descr!r}")
    if order == "=":
        order = "<" if np.little_endian else ">"
    return np.dtype((order if int(size) > 1 else "|") + kind + size)


def read_npy(data: bytes) -> np.ndarray:
    if not data.startswith(MAGIC):
        raise NpyFormatError("bad magic: not an NPY file")
    if len(data) < 10:
        raise NpyFormatError("NPY file truncated in preamble")
    major, minor = data[6], data[7]
    if (major, minor) == (1, 0):
        (hlen,) = struct.unpack_from("<H", data, 8)
        start = 10
    elif (major, minor) == (2, 0):
        if len(data) < 12:
            raise NpyFormatError("NPY file truncated in preamble")
        (hlen,) = struct.unpack_from("<I", data, 8)
        start = 12
    else:
        raise NpyFormatError(f"unsupported NPY version {major}.{minor}")
    header_bytes = data[start : start + hlen]
    if len(header_bytes) != hlen:
        raise NpyFormatError("NPY header truncated")
    try:
        header = ast.literal_eval(header_bytes.decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"NPY header is not a literal dict: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpyFormatError(f"NPY header must have descr/fortran_order/shape keys, got {header!r}")
    if header["fortran_order"]:
        raise UnsupportedLayoutError("fortran_order=True arrays are not supported; store arrays in C order")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise NpyFormatError(f"bad shape {shape!r}")
    dtype = _parse_descr(header["descr"])
    count = int(np.prod(shape, dtype=np.int64))
    body = data[start + hlen :]
    if len(body) < count * dtype.itemsize:
        raise NpyFormatError(f"NPY body holds {len(body)} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(body, dtype=dtype, count=count).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_npy(arr: np.ndarray) -> bytes:
    """Serialize ``arr`` as NPY 1.0 (2.0 if the header would not fit)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype.kind not in _KINDS:
        raise NpyFormatError(f"cannot write dtype {arr.dtype}")
    descr = arr.dtype.str
    shape = repr(tuple(int(s) for s in arr.shape))
    header = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (descr, shape)
    for version, prefix_len, fmt in (((1, 0), 10, "<H"), ((2, 0), 12, "<I")):
        total = prefix_len + len(header) + 1
        padded = header + " " * ((64 - total % 64) % 64) + "\n"
        if version == (1, 0) and len(padded) > 0xFFFF:
            continue
        pre = MAGIC + bytes(version) + struct.pack(fmt, len(padded))
        return pre + padded.encode("latin1") + arr.tobytes()
    raise NpyFormatError("header too large")  # pragma: no cover


def read_npz(source: Union[str, Path, bytes]) -> dict[str, np.ndarray]:
    """Read every ``*.npy`` member of a ZIP archive (stored or deflated)."""
    handle = io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else source
    try:
        with zipfile.ZipFile(handle) as zf:
            out = {}
            for info in zf.infolist():
                if not info.filename.endswith(".npy"):
                    continue
                if info.compress_type not in (zipfile.ZIP_STORED, zipfile.ZIP_DEFLATED):
                    raise NpyFormatError(f"member {info.filename} uses unsupported compression")
                out[info.filename[: -len(".npy")]] = read_npy(zf.read(info))
            return out
    except zipfile.BadZipFile as exc:
        raise NpyFormatError(f"not a ZIP archive: {exc}") from exc


def write_npz(path: Union[str, Path], arrays: Mapping[str, np.ndarray], compress: bool = False) -> Path:
    path = Path(path)
    mode = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(path, "w", compression=mode) as zf:
        for key, arr in arrays.items():
            zf.writestr(key + ".npy", write_npy(arr))
    return path
