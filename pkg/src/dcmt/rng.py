"""Deterministic random streams.

xoshiro256** seeded through splitmix64. The generator is tiny, portable,
and its full state serializes to four integers, which is what lets
checkpoints resume a training run mid-stream with identical draws.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    z = z ^ (z >> 31)
    return x, z


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** stream with serializable state.

    Normal draws use Box-Muller; the spare normal is part of the state so
    a save/load roundtrip continues the exact same sequence.
    """

    def __init__(self, seed: int):
        s = seed & _MASK
        state = []
        for _ in range(4):
            s, out = _splitmix64(s)
            state.append(out)
        # xoshiro's all-zero state is degenerate; splitmix64 output makes it
        # astronomically unlikely, guard anyway
        if not any(state):
            state[0] = 1
        self._s = state
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, so no modulo bias."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # Box-Muller; u1 rejected at exactly 0 so log stays finite
        while True:
            u1 = self.uniform()
            if u1 > 0.0:
                break
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> list[float]:
        return [self.normal() for _ in range(n)]

    def shuffle(self, items: list) -> None:
        """Fisher-Yates in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def state_dict(self) -> dict:
        return {"s": list(self._s), "spare_normal": self._spare_normal}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(0)
        s = [int(v) & _MASK for v in state["s"]]
        if len(s) != 4:
            raise ValueError("rng state needs exactly 4 words")
        rng._s = s
        spare = state.get("spare_normal")
        rng._spare_normal = None if spare is None else float(spare)
        return rng


def derive_seed(seed: int, index: int) -> int:
    """Decorrelated child seed for item `index` under master `seed`."""
    _, a = _splitmix64((seed & _MASK) ^ 0xA0761D6478BD642F)
    mixed = (a + (index & _MASK) * 0x9E3779B97F4A7C15) & _MASK
    _, out = _splitmix64(mixed)
    return out


def derive_stream(seed: int, index: int) -> Rng:
    return Rng(derive_seed(seed, index))
