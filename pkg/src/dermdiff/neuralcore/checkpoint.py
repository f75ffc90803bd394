"""Binary parameter checkpoints.

Layout: magic bytes "DDMN", format version (u32 LE), then one record per
tensor: name length (u32 LE), UTF-8 name, rank (u32 LE), extents (u64 LE
each), raw little-endian float64 values.  Records are written in sorted name
order; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DDMN"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or unreadable."""


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            # np.asarray keeps rank-0 tensors rank-0; tobytes() yields C-order
            # bytes regardless of the source layout.
            arr = np.asarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r} in {path} (expected {MAGIC!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint while reading name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name!r}"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, f"extent of {name!r}"))[0] for _ in range(rank)
            )
            count = 1
            for extent in shape:
                count *= extent
            raw = _read_exact(fh, 8 * count, f"values of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return tensors
