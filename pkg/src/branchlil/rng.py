"""Counter-based SplitMix64 streams.

Draw ``i`` (zero-based) of the stream with key ``k`` is
``mix64(k + (i + 1) * GOLDEN)`` modulo 2**64, so any draw can be computed
without touching the others.  Replicate ``r`` of a run seeded with
``master`` uses the key ``mix64(mix64(master) + r * GOLDEN)``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def draw(key: int, i: int) -> int:
    """The ``i``-th 64-bit output of stream ``key``."""
    return mix64(key + (i + 1) * GOLDEN)


def stream_key(master_seed: int, index: int) -> int:
    return mix64(mix64(master_seed) + index * GOLDEN)


def stream_keys(master_seed: int, n: int) -> np.ndarray:
    return np.array([stream_key(master_seed, r) for r in range(n)], dtype=np.uint64)


def to_unit(z: int) -> float:
    """Top 53 bits as a double in [0, 1)."""
    return (z >> 11) * 2.0**-53


_G = np.uint64(GOLDEN)
_U1 = np.uint64(_M1)
_U2 = np.uint64(_M2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 2.0**-53


@njit(cache=True)
def nb_mix64(z):
    z = (z ^ (z >> _S30)) * _U1
    z = (z ^ (z >> _S27)) * _U2
    return z ^ (z >> _S31)


@njit(cache=True)
def nb_uniform(key, counter):
    """Uniform double from draw ``counter`` of stream ``key``."""
    z = nb_mix64(key + (counter + _ONE) * _G)
    return float(z >> _S11) * _INV53
