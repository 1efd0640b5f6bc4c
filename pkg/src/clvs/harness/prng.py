"""SplitMix64, vectorized.

The n-th output (n = 1, 2, ...) for seed ``s`` is ``mix(s + n * GOLDEN)`` with::

    GOLDEN = 0x9E3779B97F4A7C15
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

all modulo 2**64. Doubles in [0, 1) take the top 53 bits: ``(z >> 11) * 2**-53``.
Only exact integer ops and a single IEEE multiply are involved, so streams are
bit-identical on every platform.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MUL1 = np.uint64(0xBF58476D1CE4E5B9)
MUL2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MUL1
    z = (z ^ (z >> np.uint64(27))) * MUL2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        counters = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + counters * GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(GOLDEN)) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def symmetric(self, n: int, half_width: float) -> np.ndarray:
        """Uniform on [-half_width, half_width)."""
        return (2.0 * self.uniform(n) - 1.0) * half_width

    def integers(self, n: int, high: int) -> np.ndarray:
        """Integers in [0, high) by multiply-shift on the top 32 bits."""
        top = (self.next_u64(n) >> np.uint64(32)).astype(np.uint64)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)
