"""Seeded random streams with splitmix64-derived child streams."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """A reproducible random stream.

    Identical seeds and call sequences give identical draws.  ``child(k)``
    returns an independent stream keyed on (seed, k) without consuming
    anything from the parent; ``spawn()`` does the same with an internal
    counter as the key.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed) & _MASK64
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(splitmix64(self.seed)))

    def child(self, stream_id: int) -> "Rng":
        return Rng(splitmix64(self.seed ^ splitmix64(int(stream_id) & _MASK64)))

    def spawn(self) -> "Rng":
        self.counter += 1
        return self.child(self.counter)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter, "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng.counter = state["counter"]
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng

    # thin wrappers over numpy's Generator
    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._gen.permutation(x)
