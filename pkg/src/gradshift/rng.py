"""Deterministic PRNG: xoshiro256** seeded through SplitMix64.

Every stochastic choice in the package (weight init, epoch shuffling,
synthetic-data noise, split assignment) draws from this generator so that a
64-bit seed pins the whole experiment bit-for-bit, independent of numpy's
global state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(seed: int):
    """Yield the SplitMix64 sequence for ``seed`` (used only for seeding)."""
    state = seed & _MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


class Xoshiro256StarStar:
    """xoshiro256** generator; state initialized from SplitMix64(seed)."""

    def __init__(self, seed: int):
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        sm = splitmix64(seed)
        self._s = [next(sm), next(sm), next(sm), next(sm)]

    @classmethod
    def from_state(cls, state) -> "Xoshiro256StarStar":
        rng = cls.__new__(cls)
        rng._s = [int(w) & _MASK64 for w in state]
        return rng

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = np.array([self.uniform() for _ in range(n)], dtype=np.float64)
        return (low + (high - low) * vals).reshape(shape)

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) via rejection of the biased tail."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = _MASK64 - (_MASK64 + 1) % bound
        while True:
            x = self.next_u64()
            if x <= limit:
                return x % bound

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        order = list(range(n))
        self.shuffle(order)
        return np.array(order, dtype=np.int64)
