"""Counter-based random streams.

Every variate is a pure function of ``(seed, stream, index)``: a SplitMix64
finalizer hashes the counter into 64 random bits.  Any slice of a stream can
be generated independently, so results never depend on how work is split.
"""

from __future__ import annotations

import zlib

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, stream: str | int = 0) -> np.uint64:
    if isinstance(stream, str):
        stream = zlib.crc32(stream.encode())
    with np.errstate(over="ignore"):
        k = _mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        k = _mix64(k ^ (np.uint64(stream & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + _GOLDEN))
    return k[0]


def random_bits(seed: int, stream: str | int, start: int, count: int) -> np.ndarray:
    key = stream_key(seed, stream)
    idx = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(key + (idx + np.uint64(1)) * _GOLDEN)


def uniform(seed: int, stream: str | int, shape, start: int = 0) -> np.ndarray:
    """Uniform variates in the open interval (0, 1)."""
    n = int(np.prod(shape, dtype=np.int64))
    bits = random_bits(seed, stream, start, n) >> np.uint64(11)
    return ((bits.astype(np.float64) + 0.5) * 2.0**-53).reshape(shape)


def normal(seed: int, stream: str | int, shape, start: int = 0) -> np.ndarray:
    """Standard normal variates via the inverse CDF of :func:`uniform`."""
    return ndtri(uniform(seed, stream, shape, start))
