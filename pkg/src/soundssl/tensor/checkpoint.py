"""Versioned binary weight checkpoints.

Layout (little-endian)::

    magic  b"SSLW"
    u32    version
    u32    layer count
    per layer:
        u16 name length, utf-8 name
        u32 ndim, u32 dims...
        float32 values, row-major
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSLW"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def checkpoint_bytes(state: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name, values in state.items():
        arr = np.asarray(values, dtype="<f4", order="C")  # keeps 0-d arrays 0-d
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a weight checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        pos = 12
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(blob):
                raise CheckpointError(f"truncated checkpoint at layer {name!r}")
            state[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last layer")
    return state


def save_checkpoint(path, state: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())


def state_checksum(state: dict) -> str:
    return hashlib.sha256(checkpoint_bytes(state)).hexdigest()
