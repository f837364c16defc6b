"""Binary container for named parameter arrays.

Layout: the 4 magic bytes ``DMF1`` followed by one record per array, in
write order. Each record is

    u64 name length | UTF-8 name | u64 rank | u64 extent per axis | payload

with all integers little-endian unsigned 64-bit and the payload little-endian
float64, row-major. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMF1"


class CheckpointError(ValueError):
    """Raised for malformed or truncated checkpoint files."""


def save(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in insertion order."""
    chunks = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container back into an ordered name -> array mapping."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = 4
    total = len(blob)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > total:
            raise CheckpointError(f"{path}: truncated while reading {what} "
                                  f"at offset {pos}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    while pos < total:
        (name_len,) = struct.unpack("<Q", take(8, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name!r}")
        extents = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        count = 1
        for e in extents:
            count *= e
        payload = take(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(extents)
        if name in out:
            raise CheckpointError(f"{path}: duplicate record name {name!r}")
        out[name] = arr
    return out
