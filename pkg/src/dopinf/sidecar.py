"""Binary sidecar files: named numeric arrays with a fixed little-endian layout.

Every artifact that must survive between invocations (transform parameters,
reduction factors, reduced operators, trajectories, synthetic ground truth)
is stored in this one container so that byte-for-byte comparisons of outputs
are meaningful across rank counts and backends.

Layout:
    magic   8 bytes  b"DOPINFSC"
    version u32
    count   u32
    entry*  name_len u16, name utf-8, dtype_code u8, ndim u8, dims u64 * ndim,
            payload (C order, little-endian)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"DOPINFSC"
VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _coerce(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return np.asarray(arr, dtype="<f8", order="C")
    if arr.dtype.kind in "iub" and arr.dtype != np.uint8:
        return np.asarray(arr, dtype="<i8", order="C")
    if arr.dtype == np.uint8:
        return np.asarray(arr, order="C")
    raise DataError(f"unsupported sidecar dtype {arr.dtype}")


def write_arrays(path, arrays: dict) -> None:
    """Write a name -> array mapping. Scalars are stored as 0-d arrays."""
    path = Path(path)
    blobs = [struct.pack("<8sII", MAGIC, VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = _coerce(value)
        name_b = name.encode("utf-8")
        blobs.append(struct.pack("<H", len(name_b)))
        blobs.append(name_b)
        blobs.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        blobs.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(blobs))


def read_arrays(path) -> dict:
    """Read back a sidecar written by :func:`write_arrays`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read sidecar {path}: {exc}") from exc
    try:
        magic, version, count = struct.unpack_from("<8sII", raw, 0)
    except struct.error as exc:
        raise DataError(f"sidecar {path} is truncated") from exc
    if magic != MAGIC:
        raise DataError(f"sidecar {path} has wrong magic {magic!r}")
    if version != VERSION:
        raise DataError(f"sidecar {path} has unsupported version {version}")

    out = {}
    offset = 16
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = struct.unpack_from("<BB", raw, offset)
        offset += 2
        dims = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise DataError(f"sidecar {path}: unknown dtype code {code}")
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        payload = raw[offset : offset + n_bytes]
        if len(payload) != n_bytes:
            raise DataError(f"sidecar {path}: entry {name!r} is truncated")
        offset += n_bytes
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out
