"""Portable xorshift64* generator.

Every random draw in the package goes through :class:`Rng` so that a run is
bit-reproducible across platforms and numpy versions.
"""

from __future__ import annotations

import hashlib
import math
from typing import MutableSequence, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stable_hash(text: str) -> int:
    """64-bit hash of a string that does not depend on PYTHONHASHSEED."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class Rng:
    """xorshift64* with a splitmix64-scrambled seed."""

    def __init__(self, seed: int):
        state = splitmix64(seed & _MASK64)
        self._state = state or 0x9E3779B97F4A7C15
        self._spare: float | None = None

    def fork(self, tag: str | int) -> "Rng":
        """Independent child stream keyed by ``tag``; does not advance self."""
        return Rng(splitmix64(self._state ^ stable_hash(str(tag))))

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self._state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint needs n > 0")
        limit = _MASK64 - (_MASK64 % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def choice(self, seq: Sequence[T]) -> T:
        return seq[self.randint(len(seq))]

    def shuffle(self, seq: MutableSequence) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    def random_array(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)], dtype=np.float64)

    def normal_array(self, shape: tuple[int, ...] | int, std: float = 1.0,
                     dtype=np.float32) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        vals = np.array([self.normal() for _ in range(n)], dtype=np.float64)
        return (vals * std).astype(dtype).reshape(shape)
