"""Counter-based SplitMix64 streams.

Output ``i`` of the stream seeded with ``s`` is ``mix(s + (i + 1) * GAMMA)``
in wrapping 64-bit arithmetic, so any block of draws can be produced in one
vectorized call and streams are bit-identical across platforms.
"""
from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed, *keys):
    """Fold integer ``keys`` into ``seed``; each step is one SplitMix64 output."""
    s = int(seed) & _MASK
    for k in keys:
        s = int(mix64(np.uint64(((s ^ (int(k) & _MASK)) + int(GAMMA)) & _MASK))) & _MASK
    return s


class SplitMix64:
    """Sequential view over a SplitMix64 stream."""

    def __init__(self, seed):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n):
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * GAMMA
        return mix64(state)

    def uniform(self, size=None, low=0.0, high=1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(shape)

    def integers(self, low, high, size=None):
        u = self.uniform(size)
        return (low + np.floor(np.asarray(u) * (high - low))).astype(np.int64) if size is not None else int(low + np.floor(u * (high - low)))

    def normal(self, size=None):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape)) if shape else 1
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return float(z[0]) if size is None else z.reshape(shape)

    def laplace(self, scale=1.0, size=None):
        u = np.asarray(self.uniform(size)) - 0.5
        return -np.asarray(scale) * np.sign(u) * np.log1p(-2.0 * np.abs(u))
