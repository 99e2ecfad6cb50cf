"""Counter-based deterministic random numbers.

Every value is a pure function of ``(seed, row, col)``, so any entry of a
random matrix can be computed on its own: generation order, chunking and
worker count cannot change the result. The mixer is the splitmix64
finalizer, applied to a chained key; numpy uint64 arithmetic wraps mod 2^64.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TOP = np.uint64(63)


def mix64(z: np.ndarray | int) -> np.ndarray:
    """splitmix64 finalizer; bijective on uint64. Multiplication wraps mod
    2^64 by design, so the overflow warning is silenced."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _seed_key(seed: int) -> np.uint64:
    with np.errstate(over="ignore"):
        key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GAMMA
    return mix64(key)[()]


def hash_grid(seed: int, rows: np.ndarray | int, cols: np.ndarray | int) -> np.ndarray:
    """uint64 hash for each (row, col) pair, broadcast over the two axes."""
    rows = np.atleast_1d(np.asarray(rows, dtype=np.uint64))
    cols = np.atleast_1d(np.asarray(cols, dtype=np.uint64))
    row_keys = mix64(_seed_key(seed) ^ rows)
    with np.errstate(over="ignore"):
        cell_keys = row_keys[:, None] ^ (cols[None, :] * _GAMMA)
    return mix64(cell_keys)


def bernoulli_grid(seed: int, rows: np.ndarray | int, cols: np.ndarray | int) -> np.ndarray:
    """Fair coin per (row, col) cell, as a uint8 matrix of {0, 1}."""
    return (hash_grid(seed, rows, cols) >> _TOP).astype(np.uint8)


def uniform_grid(seed: int, rows: np.ndarray | int, cols: np.ndarray | int) -> np.ndarray:
    """Uniform [0, 1) per (row, col) cell with 53-bit resolution."""
    return (hash_grid(seed, rows, cols) >> _S11) * (2.0 ** -53)


def derive(seed: int, stream: int) -> int:
    """Seed for an independent substream; distinct streams do not collide
    with each other or with the parent's own grids."""
    with np.errstate(over="ignore"):
        key = _seed_key(seed) ^ (np.uint64(stream & 0xFFFFFFFFFFFFFFFF) * _GAMMA + _M2)
    return int(mix64(key)[()])
