"""Portable pseudo-random test data.

Element ``i`` (0-based) of a stream seeded with ``seed`` is::

    z = (seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    z =   z ^ (z >> 31)
    x = (z >> 11) * 2**-53 * 2 - 1          # uniform on [-1, 1)

which is SplitMix64 written in counter form. Every step is exact in 64-bit
integer and IEEE double arithmetic, so any language reproduces it bit for bit.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Raw 64-bit outputs ``offset .. offset + n - 1`` of the stream."""
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + idx * np.uint64(GOLDEN_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform(seed: int, shape: tuple[int, ...], offset: int = 0) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    bits = splitmix64(seed, n, offset) >> np.uint64(11)
    return (bits.astype(np.float64) * 2.0**-53 * 2.0 - 1.0).reshape(shape)


def gen_synthetic(seed: int, n_tokens: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Keys take stream elements ``[0, n*d)``, values the next ``n*d``, row-major."""
    if n_tokens < 0 or head_dim <= 0:
        raise ValueError("n_tokens must be >= 0 and head_dim > 0")
    n = n_tokens * head_dim
    keys = uniform(seed, (n_tokens, head_dim))
    values = uniform(seed, (n_tokens, head_dim), offset=n)
    return keys, values


def gen_queries(seed: int, n: int, head_dim: int) -> np.ndarray:
    return uniform(seed, (n, head_dim))


def derive_seed(seed: int, *tags: int) -> int:
    """Independent sub-stream seed: the first stream output after folding in ``tags``."""
    s = seed & MASK64
    for t in tags:
        s = int(splitmix64((s ^ (t * GOLDEN_GAMMA)) & MASK64, 1)[0])
    return s
