"""Splittable, named random streams.

Every stochastic consumer in the pipeline (parameter init, noise draws,
shuffles, sampling) gets its own named substream, so adding or reordering one
consumer can never perturb the draws seen by another.  Streams are backed by
the counter-based Philox generator keyed by a hash of (root seed, path), which
makes derivation order-independent and stable across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class SeedStream:
    """A node in a tree of named random streams."""

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)

    def child(self, name: str) -> "SeedStream":
        """Derive the substream `name` under this node."""
        return SeedStream(self.seed, self.path + (str(name),))

    def _digest(self) -> bytes:
        label = str(self.seed) + "\x1f" + "\x1f".join(self.path)
        return hashlib.sha256(label.encode("utf-8")).digest()

    def generator(self) -> np.random.Generator:
        """Fresh generator at the start of this stream."""
        key = int.from_bytes(self._digest()[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def integer_seed(self) -> int:
        """Stable u64 identifying this stream (used as a record seed)."""
        return int.from_bytes(self._digest()[16:24], "little")

    def __repr__(self) -> str:  # pragma: no cover
        return f"SeedStream(seed={self.seed}, path={'/'.join(self.path)!r})"
