"""SplitMix64-seeded xoshiro256** generator.

Everything random in the package (data, init, episodes, augmentation) draws
from this generator so that a single integer seed reproduces a run bit for
bit across platforms and numpy versions.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys) -> int:
    """Stable child seed from a parent seed and any mix of str/int keys."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed & MASK64).to_bytes(8, "little"))
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return splitmix64(int.from_bytes(h.digest(), "little"))


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def splitmix64_array(seed: int, n: int) -> np.ndarray:
    """Vectorised counter-mode SplitMix64: element i is splitmix64(seed + i*golden)."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


class Rng:
    """xoshiro256** with a SplitMix64-expanded seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._s = [splitmix64((self.seed + i * _GOLDEN) & MASK64) for i in range(4)]

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] (inclusive), rejection-sampled."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % span

    def normal(self) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def sample(self, items, n: int) -> list:
        """n distinct items, uniformly without replacement (partial Fisher-Yates)."""
        pool = list(items)
        if n > len(pool):
            raise ValueError(f"cannot sample {n} of {len(pool)} items")
        for i in range(n):
            j = self.randint(i, len(pool) - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:n]

    def choice(self, items):
        return items[self.randint(0, len(items) - 1)]

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        bits = splitmix64_array(self.next_u64(), n) >> np.uint64(11)
        u = bits.astype(np.float64) * (1.0 / (1 << 53))
        return (lo + (hi - lo) * u).reshape(shape)

    def spawn(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))
