"""Counter-based random numbers.

Every random draw in the engine is a pure function of integer keys
(seed, stream, counter), so output never depends on evaluation order or
worker scheduling.  The mixer is the splitmix64 finalizer, which passes
standard avalanche tests and is cheap to vectorize with uint64 numpy ops.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def hash_u64(seed: int, *streams) -> np.ndarray:
    """Combine a seed and integer streams (scalars or arrays) into mixed uint64s.

    Broadcasting follows numpy rules, so passing index grids produces one
    independent value per grid cell.
    """
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        for s in streams:
            s = np.asarray(s, dtype=np.uint64)
            h = _mix(h + _GOLDEN + s * _MIX1)
    return h


def uniform01(seed: int, *streams) -> np.ndarray:
    """Uniform draws in [0, 1) keyed by (seed, streams)."""
    return (hash_u64(seed, *streams) >> np.uint64(11)) * (1.0 / (1 << 53))


def generator(seed: int, *streams) -> np.random.Generator:
    """A numpy Generator whose state is derived from (seed, streams).

    Used where a full Generator API is handier than raw hashes (shuffles,
    normal draws); still fully determined by the keys.
    """
    key = int(hash_u64(seed, *[np.uint64(s) for s in streams]))
    return np.random.Generator(np.random.Philox(key=key))
