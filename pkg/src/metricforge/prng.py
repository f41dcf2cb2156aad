"""Deterministic pseudo-randomness for splits, weight init, and batching.

All stochastic behaviour in the toolkit is driven by splitmix64 so that a
(seed, input) pair reproduces bit-identical results on any platform and in
any language that implements the same sequence. numpy's own generators are
deliberately not used anywhere determinism is part of the contract.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _scramble(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class SplitMix64:
    """The splitmix64 generator (Steele/Lea parameters)."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _scramble(self.state)

    def next_float(self) -> float:
        # 53-bit mantissa in [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float, shape: tuple[int, ...] = ()) -> np.ndarray | float:
        if shape == ():
            return lo + (hi - lo) * self.next_float()
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for k in range(n):
            out[k] = lo + (hi - lo) * self.next_float()
        return out.reshape(shape)

    def randrange(self, n: int) -> int:
        """Integer in [0, n) by modulo reduction (bias negligible for n << 2^64)."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates: i descending, j = next_u64() mod (i + 1)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; used to turn labels and tokens into seeds."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Derive an independent stream seed from (seed, label), deterministically."""
    return _scramble((int(seed) ^ fnv1a64(label.encode("utf-8"))) & _MASK64)
