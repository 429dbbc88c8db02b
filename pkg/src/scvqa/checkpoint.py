"""Flat binary checkpoint format for named float64 tensors.

Layout (all little-endian):
    magic  b"SCVQ"
    u32    version (1)
    u32    record count
    per record:
        u16     name length
        bytes   name (utf-8)
        u8      rank
        u32[r]  shape
        f64[..] payload, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SCVQ"
VERSION = 1


class CheckpointError(Exception):
    """Malformed or truncated checkpoint file."""


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        # records sorted by name so saves are byte-identical regardless of
        # dict insertion order
        for name in sorted(tensors):
            arr = tensors[name]
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(str(e)) from e
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            end = off + 8 * n
            if end > len(blob):
                raise CheckpointError(f"{path}: truncated payload for '{name}'")
            arr = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
            off = end
        if off != len(blob):
            raise CheckpointError(f"{path}: trailing bytes after last record")
        return out
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header ({e})") from e
