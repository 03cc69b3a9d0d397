"""Seeded random streams.

Every stream is numpy's PCG64 bit generator seeded through ``SeedSequence``.
PCG64 and the ziggurat normal sampler are specified bit-for-bit by numpy, so a
given seed yields the same draws on every platform. Named child streams are
derived from ``(seed, crc32(name), *indices)`` and are independent of how many
draws the parent has made.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def child(self, name: str, *indices: int) -> "Rng":
        return Rng(self.seed, self.key + (zlib.crc32(name.encode()), *indices))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, options, size=None):
        return self._gen.choice(options, size)

    # -- persistence ------------------------------------------------------

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng
