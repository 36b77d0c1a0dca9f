"""Binary checkpoint format for named tensor dicts.

Layout, all little-endian:

    magic   4 bytes  "S4CP"
    version u16
    count   u32      number of named tensors
    per tensor:
        name_len u16, then UTF-8 name bytes
        rank     u8
        dims     u32 each
        values   f32, C order

Values are stored at 32-bit regardless of the in-memory dtype; loading
returns float arrays in the caller's requested dtype.  Writes go through a
temp file in the same directory followed by an atomic rename, so a crash
never leaves a half-written checkpoint at the target path.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION

MAGIC = b"S4CP"


class CheckpointError(IOError):
    """Malformed or truncated checkpoint file."""


def save_checkpoint(path, tensors):
    """Write a dict name -> ndarray to ``path`` atomically."""
    parts = [MAGIC, struct.pack("<HI", CHECKPOINT_FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {len(nb)} bytes")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank too large: {arr.ndim}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(parts)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, dtype=np.float64):
    """Read a checkpoint back as a dict name -> ndarray of ``dtype``."""
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {off}")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(take(4 * n), dtype="<f4")
        out[name] = vals.astype(dtype).reshape(dims)
    if off != len(view):
        raise CheckpointError(f"trailing bytes after last tensor: {len(view) - off}")
    return out
