"""Deterministic 64-bit RNG used for workload generation, noise, and fuzzing.

splitmix64 keeps generated programs and trace files bit-identical across
interpreter versions and platforms; the stdlib Mersenne Twister only
guarantees that for random(), not for the derived helpers we need.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1

# Algorithm identifier stored in trace headers so a reader can verify the
# stream is reproducible.
RNG_ALGORITHM = "splitmix64"


class SplitMix64:
    """Steele/Lea/Flood splitmix64: one u64 of state, 64 bits out per step."""

    __slots__ = ("_state",)

    def __init__(self, seed: int) -> None:
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform int in [0, bound) via fixed-point multiply (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.next_u64() * bound) >> 64

    def randint(self, lo: int, hi: int) -> int:
        """Uniform int in [lo, hi] inclusive."""
        return lo + self.below(hi - lo + 1)

    def rand_float(self) -> float:
        return self.next_u64() / 2.0**64

    def chance(self, p: float) -> bool:
        return self.rand_float() < p

    def choice(self, seq):
        return seq[self.below(len(seq))]

    def weighted(self, items):
        """Pick from [(item, weight), ...]; weights need not sum to 1."""
        total = sum(w for _, w in items)
        x = self.rand_float() * total
        acc = 0.0
        for item, w in items:
            acc += w
            if x < acc:
                return item
        return items[-1][0]
