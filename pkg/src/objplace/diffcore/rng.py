"""Seeded random streams.

Backed by numpy's PCG64, whose output sequence for a given seed is fixed
across platforms. ``Rng.child(key)`` derives an independent stream from the
parent seed and a string key, so components can own their randomness
without consuming draws from one another.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, key: str | int) -> "Rng":
        k = key if isinstance(key, int) else zlib.crc32(key.encode("utf-8"))
        return Rng(self.seed, self.path + (int(k),))

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
