"""Counter-based random streams.

Every block of paths owns a Philox generator keyed by ``(seed, block)``, so
the numbers a block sees never depend on how blocks are scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["BLOCK", "RngStreams", "blocks"]

BLOCK = 4096


@dataclass(frozen=True)
class RngStreams:
    seed: int
    salt: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**63):
            raise ValueError("seed must be a non-negative 63-bit integer")

    def substream(self, index: int) -> np.random.Generator:
        key = np.array([int(index), (int(self.seed) << 8) | (int(self.salt) & 0xFF)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, salt: int) -> "RngStreams":
        """Independent family for a different purpose (e.g. initial draws vs increments)."""
        return RngStreams(self.seed, salt)


def blocks(n: int, size: int = BLOCK):
    """Yield ``(block_index, start, stop)`` covering ``range(n)``."""
    for k, start in enumerate(range(0, n, size)):
        yield k, start, min(n, start + size)
