"""Counter-based random streams.

Every Monte Carlo sample owns a 64-bit seed derived by hashing its coordinates
(master seed, policy id, p key, sample index). Uniform draws for step ``h`` and
sub-stream ``j`` are SplitMix64 outputs at counter ``2*h + j + 1``, so results
do not depend on evaluation order or on how work is split across threads.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

ACTION_STREAM = 0
TRANSITION_STREAM = 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def hash_seed(*parts: object) -> int:
    """Stable 64-bit hash of the string forms of ``parts``."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def sample_seeds(base: int, indices: np.ndarray) -> np.ndarray:
    """Per-sample seeds ``mix(base + (k + 1) * gamma)`` for sample indices ``k``."""
    k = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(base & _MASK64) + (k + np.uint64(1)) * _GAMMA)


def uniforms(seeds: np.ndarray, step: int, stream: int) -> np.ndarray:
    """One uniform in [0, 1) per seed for the given step and sub-stream."""
    s = np.asarray(seeds, dtype=np.uint64)
    counter = np.uint64(2 * step + stream + 1)
    with np.errstate(over="ignore"):
        z = _mix(s + counter * _GAMMA)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def split(seeds: np.ndarray, width: int) -> np.ndarray:
    """Derive ``width`` independent child seeds per seed, shape (n, width)."""
    s = np.asarray(seeds, dtype=np.uint64)
    k = np.arange(1, width + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(s[:, None] ^ _mix(k * _GAMMA))
