"""Deterministic, splittable random numbers built on SplitMix64.

The generator is counter based: the ``k``-th output of a stream with state
``s`` is ``mix(s + k * GAMMA)``, so bulk draws are vectorised with numpy
``uint64`` arithmetic and give the same bits on every platform.

Reference outputs for seed 0 (first three draws)::

    0xE220A8397B1DCDAF
    0x6E789E6AA1B965F4
    0x06C45D188009454F
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream.

    Every draw advances the internal state by the number of 64-bit words
    consumed, so an identical seed and call sequence reproduces identical
    values.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK
        self.state = self.seed

    def __repr__(self):
        return f"Rng(seed={self.seed:#x}, state={self.state:#x})"

    def next_u64(self, n: int) -> np.ndarray:
        """Return ``n`` raw 64-bit outputs."""
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & _MASK
        return out

    def uniform(self, size=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Float64 uniforms in ``[low, high)`` with 53 bits of resolution."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        # Box-Muller on pairs of uniforms; 1 - u keeps the log argument positive.
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def truncated_normal(self, size=(), std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draws clipped by resampling to ``|z| <= bound`` (in std units)."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        z = self.normal(shape).ravel()
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self.normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return (std * z).reshape(shape)

    def integers(self, low: int, high: int, size=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def choice(self, options, p=None):
        options = list(options)
        if p is None:
            return options[int(self.integers(0, len(options), 1)[0])]
        cdf = np.cumsum(p)
        idx = int(np.searchsorted(cdf, self.uniform(1)[0] * cdf[-1], side="right"))
        return options[min(idx, len(options) - 1)]

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)``."""
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, key: int | str = 0) -> "Rng":
        """Derive an independent child stream without advancing this one."""
        if isinstance(key, str):
            key = int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")
        with np.errstate(over="ignore"):
            child = _mix(np.array([(self.state ^ (int(key) * GAMMA)) & _MASK], dtype=np.uint64))
        return Rng(int(child[0]))
