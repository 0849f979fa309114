"""Seeded random number streams.

PCG64 is used because its output is defined bit-for-bit independently of the
platform, so a seed reproduces the same draws everywhere.
"""

from __future__ import annotations

import json

import numpy as np


class Rng:
    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; depends only on this stream's seed and ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def get_state(self) -> str:
        return json.dumps({"seed": self.seed, "bit_generator": self._gen.bit_generator.state},
                          sort_keys=True)

    def set_state(self, state: str) -> None:
        st = json.loads(state)
        self.seed = st["seed"]
        self._gen.bit_generator.state = st["bit_generator"]

    @classmethod
    def from_state(cls, state: str) -> "Rng":
        rng = cls(0)
        rng.set_state(state)
        return rng
