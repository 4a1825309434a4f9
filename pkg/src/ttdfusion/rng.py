"""Counter-based 64-bit random numbers.

Every draw is ``splitmix64(key + counter * GOLDEN)`` where ``key`` is derived
from ``(seed, stream)``.  Only integer arithmetic modulo 2**64 and exact IEEE
scaling are involved, so a given ``(seed, stream, counter)`` yields the same
bits on every platform and in every language that follows this recipe:

    key   = splitmix64(seed ^ splitmix64(stream + 1))
    u[i]  = splitmix64(key + (counter + i) * 0x9E3779B97F4A7C15)
    f[i]  = (u[i] >> 11) * 2**-53                      # uniform [0, 1)
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):  # wraparound is the point
        z = z ^ (z >> np.uint64(30))
        z = z * _M1
        z = z ^ (z >> np.uint64(27))
        z = z * _M2
    return z ^ (z >> np.uint64(31))


def _mix_scalar(value: int) -> int:
    return int(splitmix64(np.array([value & _MASK64], dtype=np.uint64))[0])


class CounterRNG:
    """Stateless-per-draw generator; only the counter advances."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.key = _mix_scalar(self.seed ^ _mix_scalar(self.stream + 1))
        self.counter = 0

    def child(self, stream: int) -> "CounterRNG":
        """Independent generator keyed off this one's seed and a new stream id."""
        return CounterRNG(self.key, stream)

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return splitmix64(np.uint64(self.key) + idx * GOLDEN)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(size)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.bits(n)
        return np.argsort(keys, kind="stable")
