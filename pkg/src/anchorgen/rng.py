"""Deterministic pseudo-random streams built on the splitmix64 recurrence.

Every stochastic choice in this package (parameter init, scene sampling,
epoch shuffling, random training patches) draws from :class:`SplitMix` so
that runs reproduce bit for bit across processes and platforms.

The recurrence, in 64-bit wrapping arithmetic::

    state  = (state + 0x9E3779B97F4A7C15) mod 2**64
    z      = state
    z      = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z      = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    output = z ^ (z >> 31)

Uniform doubles keep the top 53 bits: ``(output >> 11) * 2**-53``.
Substreams are named by folding integer or string tags into the seed with
the same mixing function (`derive_seed`), which makes the generator
splittable without shared state.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)
_INV53 = float(2.0**-53)


def _mix_core(state: int) -> int:
    z = state & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def mix64(x: int) -> int:
    """Splitmix64 output for the advanced state ``x + GAMMA``."""
    return _mix_core((x + _GAMMA) & _MASK)


def derive_seed(seed: int, *tags: int | str) -> int:
    """Fold tags into ``seed`` to name an independent substream.

    Integer tags are used as-is (mod 2**64); string tags hash through
    crc32 so the same label always names the same stream.
    """
    h = seed & _MASK
    for tag in tags:
        if isinstance(tag, int):
            t = tag & _MASK
        elif isinstance(tag, str):
            t = zlib.crc32(tag.encode("utf-8"))
        else:
            raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")
        h = mix64(h ^ t)
    return h


class SplitMix:
    """Sequential splitmix64 generator with vectorized draw helpers."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def split(self, *tags: int | str) -> "SplitMix":
        """Child generator for an independent named substream."""
        return SplitMix(derive_seed(self.state, *tags))

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix_core(self.state)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` float64 samples in [0, 1), vectorized."""
        if n == 0:
            return np.empty(0, dtype=np.float64)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(_GAMMA)
            z = (z ^ (z >> _U30)) * np.uint64(_MIX1)
            z = (z ^ (z >> _U27)) * np.uint64(_MIX2)
            z = z ^ (z >> _U31)
        self.state = (self.state + n * _GAMMA) & _MASK
        return (z >> _U11).astype(np.float64) * _INV53

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _INV53

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard-normal float64 samples via Box-Muller."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1]: keeps log() finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return min(int(self.uniform() * n), n - 1)

    def shuffled(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
