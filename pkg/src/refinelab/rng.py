"""Reproducible random streams: SplitMix64 seed expansion into xoshiro256++.

Every consumer asks for its own stream keyed by ``(seed, purpose, index...)``,
so draws never depend on what other parts of a run consumed before.
"""

from __future__ import annotations

import numpy as np

from refinelab import kernels

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + _GOLDEN) & MASK64
        return splitmix64_mix(self.state)


def fnv1a64(text: str) -> int:
    """Stable 64-bit FNV-1a hash of the UTF-8 bytes of ``text``."""
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, *parts: int | str) -> int:
    """Fold ``parts`` (ints or strings) into ``seed``; order matters."""
    h = splitmix64_mix((seed & MASK64) ^ _GOLDEN)
    for p in parts:
        v = fnv1a64(p) if isinstance(p, str) else int(p) & MASK64
        h = splitmix64_mix((h + _GOLDEN) ^ v)
    return h


class Stream:
    """A xoshiro256++ generator with the handful of draws the lab needs."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        s = [sm.next() for _ in range(4)]
        if not any(s):
            s[0] = 1
        self._s = np.array(s, dtype=np.uint64)

    @classmethod
    def derive(cls, seed: int, *parts: int | str) -> "Stream":
        return cls(derive_seed(seed, *parts))

    def state(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._s)

    def next_u64(self) -> int:
        return int(kernels.xoshiro_fill(self._s, 1)[0])

    def u64(self, n: int) -> np.ndarray:
        return kernels.xoshiro_fill(self._s, n)

    def random(self, n: int | None = None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        if n is None:
            return (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.random(n)

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws via Box-Muller (two uniforms per pair)."""
        m = (n + 1) // 2
        u = self.random(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n} without replacement")
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return np.array(pool[:k], dtype=np.int64)
