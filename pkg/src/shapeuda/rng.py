"""Deterministic counter-based random source used by the whole pipeline.

The generator is splitmix64 in counter mode: output ``i`` of a stream with
64-bit seed ``s`` is ``mix64(s + (i + 1) * GOLDEN)`` where ``mix64`` is the
splitmix64 finalizer and ``GOLDEN = 0x9E3779B97F4A7C15``.  The full state is
(seed, counter), so streams can be checkpointed, resumed, and reproduced
bit-for-bit by any implementation of the same recipe.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, elementwise on a uint64 array (wraps mod 2^64)."""
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class SeededRng:
    """Reproducible random stream with explicit (seed, counter) state."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        return cls(state["seed"], state["counter"])

    def spawn(self, index: int) -> "SeededRng":
        """Derive an independent child stream, e.g. one per sample."""
        key = np.array([(index + 1) * GOLDEN & _MASK64], dtype=np.uint64)
        child = np.array([self.seed], dtype=np.uint64) ^ mix64(key)
        return SeededRng(int(mix64(child)[0]))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 outputs."""
        idx = np.arange(n, dtype=np.uint64) + np.uint64((self.counter + 1) & _MASK64)
        self.counter = (self.counter + n) & _MASK64
        return mix64(np.uint64(self.seed) + idx * np.uint64(GOLDEN))

    def uniform(self, size=None) -> np.ndarray | float:
        """Uniform float64 in [0, 1): top 53 bits of the raw output."""
        if size is None:
            return float(self.raw(1)[0] >> np.uint64(11)) * 2.0**-53
        n = int(np.prod(size))
        out = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return out.reshape(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Integers in [low, high); derived from the uniform stream."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        if size is None:
            return low + min(int(self.uniform() * span), span - 1)
        u = self.uniform(size)
        return low + np.minimum((u * span).astype(np.int64), span - 1)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        if size is None:
            return float(self.normal(1)[0])
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # in (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting raw keys."""
        return np.argsort(self.raw(n), kind="stable")
