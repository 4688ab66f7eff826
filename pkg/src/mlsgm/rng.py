"""Deterministic pseudo-randomness shared by every seeded operation.

A single SplitMix64 stream backs parameter initialization, label dropping,
dataset synthesis and shuffling, so that byte-identical behaviour across
runs (and across reimplementations) only requires matching the documented
draw order of each consumer.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / (1 << 53)


class SplitMix64:
    """SplitMix64 generator; one 64-bit output per `next_u64` call."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform draw in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.next_float()

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n). Plain modulo; bias is negligible for
        the desk-scale n used here and keeps the draw count at exactly one."""
        if n <= 0:
            raise ValueError("next_below requires n >= 1")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, descending index, one draw per position."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def fill_uniform(self, shape, low: float, high: float) -> np.ndarray:
        """Array of uniform draws consumed in row-major element order."""
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = low + (high - low) * self.next_float()
        return out.reshape(shape)
