"""Counter-based deterministic random number generator.

Everything stochastic in this package draws from :class:`CounterRng`, a
SplitMix64 generator addressed by (seed, stream, counter).  The n-th draw of a
stream is a pure function of those three integers, so cohorts, parameter
initialisations and shuffle schedules are reproducible bit-for-bit on any
platform, and independent streams can be handed to parallel workers without
shared state.

SplitMix64 reference: Steele, Lea & Flood, "Fast splittable pseudorandom
number generators" (OOPSLA 2014); the finalizer is the public-domain variant
by Sebastiano Vigna (https://prng.di.unimi.it/splitmix64.c).
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15  # golden-ratio increment


def mix64(z: int) -> int:
    """SplitMix64 finalizer: avalanche a 64-bit value."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_key(seed: int, *parts: int | str) -> int:
    """Fold (seed, parts...) into a 64-bit stream key.

    Strings are hashed bytewise (FNV-1a) so streams can be named; the result
    does not depend on Python's randomized str hash.
    """
    key = mix64(seed)
    for part in parts:
        if isinstance(part, str):
            h = 0xCBF29CE484222325
            for b in part.encode("utf-8"):
                h = ((h ^ b) * 0x100000001B3) & _MASK64
            part = h
        key = mix64((key ^ (part & _MASK64)) + _GAMMA)
    return key


class CounterRng:
    """Deterministic stream of random values.

    The i-th 64-bit output is ``mix64(key + (i+1) * GAMMA)``; advancing is a
    counter increment, never data-dependent.  ``substream`` derives an
    independent generator without disturbing this one.
    """

    def __init__(self, seed: int, *stream: int | str):
        self.key = derive_key(seed, *stream) if stream else mix64(seed)
        self.counter = 0

    def substream(self, *parts: int | str) -> "CounterRng":
        child = CounterRng.__new__(CounterRng)
        child.key = derive_key(self.key, *parts)
        child.counter = 0
        return child

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.key + self.counter * _GAMMA)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Uniform float in [low, high) with 53-bit resolution."""
        u = self.next_u64() >> 11
        return low + (high - low) * (u * (1.0 / (1 << 53)))

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] via unbiased rejection."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        span = high - low + 1
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % span)
        while True:
            u = self.next_u64()
            if u < limit:
                return low + u % span

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        """Gaussian draw via Box-Muller (two uniforms per call, no caching)."""
        u1 = self.uniform()
        u2 = self.uniform()
        # guard log(0); uniform() can return exactly 0.0
        while u1 <= 0.0:
            u1 = self.uniform()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mean + sd * z

    def log_uniform(self, low: float, high: float) -> float:
        """Draw x with log(x) uniform on [log low, log high]; requires low > 0."""
        return math.exp(self.uniform(math.log(low), math.log(high)))

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def choice_weighted(self, weights: list[float]) -> int:
        """Index draw proportional to non-negative weights."""
        total = sum(weights)
        if total <= 0:
            raise ValueError("weights must sum to a positive value")
        u = self.uniform(0.0, total)
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def normals(self, n: int, mean: float = 0.0, sd: float = 1.0) -> list[float]:
        return [self.normal(mean, sd) for _ in range(n)]
