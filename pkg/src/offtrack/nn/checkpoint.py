"""Versioned binary model checkpoints.

Layout (all little-endian):

    magic   5 bytes  b"OFTK1"
    arch    u16 length + utf-8 architecture id
    count   u32 number of arrays
    arrays  per array: u16 length + utf-8 name, u8 ndim, u32 * ndim dims,
            float64 data blob

Save/load round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OFTK1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arch_id: str, arrays: dict) -> None:
    out = bytearray()
    out += MAGIC
    encoded = arch_id.encode("utf-8")
    out += struct.pack("<H", len(encoded)) + encoded
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        n = name.encode("utf-8")
        out += struct.pack("<H", len(n)) + n
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Returns (arch_id, {name: float64 array})."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:5]!r}")
    off = 5

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (alen,) = take("<H")
    arch_id = raw[off:off + alen].decode("utf-8")
    off += alen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n_items, offset=off)
        off += n_items * 8
        arrays[name] = arr.reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arch_id, arrays
