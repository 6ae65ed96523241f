"""Portable SplitMix64 generator.

Algorithm (Steele, Lea & Flood, 2014), all arithmetic modulo 2**64::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Doubles in ``[0, 1)`` take the top 53 bits: ``(x >> 11) * 2**-53``.
Pure integer arithmetic, so output is identical on every platform.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)


class SplitMix64:
    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) <= MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.state = int(seed)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * _INV53

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        """Row-major array of i.i.d. uniforms on ``[low, high)``."""
        count = int(np.prod(shape))
        raw = np.fromiter((self.random() for _ in range(count)), dtype=float, count=count)
        return (low + (high - low) * raw).reshape(shape)
