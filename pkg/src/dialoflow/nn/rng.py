"""Seeded, platform-stable random streams.

Backed by numpy's Philox counter-based bit generator. Child streams are keyed by
integers or strings so independent consumers never share a sequence.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


@dataclass
class Rng:
    seed: int
    path: tuple = ()
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        ss = np.random.SeedSequence(int(self.seed), spawn_key=tuple(_key_int(k) for k in self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, key) -> "Rng":
        return Rng(self.seed, self.path + (key,))

    def _tick(self, n) -> None:
        self.counter += int(np.prod(n)) if n is not None else 1

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        self._tick(size)
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        self._tick(size)
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        self._tick(size)
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        self._tick(size)
        return self._gen.random(size=size)

    def choice(self, a, size=None, replace: bool = True, p=None):
        self._tick(size)
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        self._tick(n if isinstance(n, int) else len(n))
        return self._gen.permutation(n)
