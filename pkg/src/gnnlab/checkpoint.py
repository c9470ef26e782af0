"""Binary checkpoint files: magic GSLC, versioned, named float64 arrays."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GSLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, arrays: dict) -> None:
    """Write name -> float64 array records, sorted by name for stable bytes."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", a.ndim)
        for dim in a.shape:
            out += struct.pack("<Q", dim)
        out += a.astype("<f8", copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_params(path) -> dict:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    arrays = {}

    def need(n, what):
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint while reading {what}")

    while pos < len(buf):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len, "name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank, "dims")
        shape = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
        pos += 8 * rank
        count = 1
        for dim in shape:
            count *= dim
        need(8 * count, f"values of {name!r}")
        a = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate param {name!r}")
        arrays[name] = a.astype(np.float64)  # own the memory, native order
    return arrays
