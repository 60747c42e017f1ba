"""Counter-based random streams keyed by ``(seed, stream)``.

Every draw is a function of the 128-bit Philox key ``(seed, stream)`` and the
position in that stream, so record ``i`` can be generated from stream ``i``
without caring how many workers run or in which order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_stream(parent: int, *keys) -> int:
    """Mix ``parent`` and arbitrary int/str keys into a new 64-bit stream id."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(parent & _MASK64).to_bytes(8, "little"))
    for k in keys:
        if isinstance(k, (int, np.integer)):
            h.update(b"i" + int(k & _MASK64).to_bytes(8, "little"))
        else:
            h.update(b"s" + str(k).encode())
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """A numpy ``Generator`` on a Philox stream identified by ``(seed, stream)``.

    Unknown attributes are forwarded to the generator, so ``rng.integers``,
    ``rng.uniform`` and friends work as usual.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        bitgen = np.random.Philox(key=(self.stream << 64) | self.seed)
        self.generator = np.random.Generator(bitgen)

    def split(self, *keys) -> "SeededRng":
        """Independent child stream; same keys always give the same child."""
        return SeededRng(self.seed, derive_stream(self.stream, *keys))

    def __getattr__(self, name):
        return getattr(self.generator, name)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream:#x})"
