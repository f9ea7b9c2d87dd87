"""Named-tensor checkpoint container.

Layout (all integers unsigned 64-bit little-endian)::

    b"LCM1"
    tensor_count
    repeated tensor_count times:
        name_length, name (UTF-8), rank, dims[rank],
        prod(dims) float32 little-endian values, row-major

Writes go to a temporary file in the destination directory and are moved
into place with ``os.replace`` so readers never observe a partial file.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .encoders import EncoderConfig, ModelParams, check_params
from .errors import CheckpointError

MAGIC = b"LCM1"
_U64 = struct.Struct("<Q")


def dumps(tensors) -> bytes:
    items = tensors.items() if hasattr(tensors, "items") else tensors
    items = list(items)
    parts = [MAGIC, _U64.pack(len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    """Decode a checkpoint into float32 arrays, preserving tensor order."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    pos = 4

    def u64():
        nonlocal pos
        if pos + 8 > len(view):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(view, pos)
        pos += 8
        return v

    out: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        nlen = u64()
        if pos + nlen > len(view):
            raise CheckpointError("truncated checkpoint")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        dims = tuple(u64() for _ in range(u64()))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated checkpoint in tensor {name!r}")
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f4").reshape(dims).copy()
        pos += nbytes
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: ModelParams, path) -> None:
    atomic_write_bytes(path, dumps(params.tensors))


def load_checkpoint(path, cfg: EncoderConfig | None = None, dtype=np.float64) -> ModelParams:
    """Read a checkpoint; with ``cfg`` the tensor names and shapes are validated."""
    with open(path, "rb") as fh:
        tensors = loads(fh.read())
    params = ModelParams({k: v.astype(dtype) for k, v in tensors.items()})
    if cfg is not None:
        check_params(params, cfg)
    return params
