"""Counter-based random streams for reproducible simulation.

Every noise draw in the simulator comes from a Philox generator keyed by
(seed, stream id, event indices). Philox is counter-based, so the values
drawn for one event are independent of the order in which events are
generated; datasets are a pure function of seed and configuration.
"""

from __future__ import annotations

import numpy as np

# Stream identifiers; keep values stable, they are part of dataset determinism.
ODOMETRY = 1
PIXEL = 2
EMBEDDING = 3
RANGE = 4
MULTIPATH = 5
DROPOUT = 6
BACKGROUND = 7
AMPLITUDE = 8
BEACON = 9
PROTOTYPE = 10

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Sebastiano Vigna's splitmix64 finalizer; good avalanche for key derivation.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_key(seed: int, *path: int) -> np.ndarray:
    """Mix seed and event path into a 128-bit Philox key."""
    h = _splitmix64(seed & _MASK64)
    for part in path:
        h = _splitmix64(h ^ (part & _MASK64))
    return np.array([h, _splitmix64(h)], dtype=np.uint64)


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for one event, keyed by (seed, *path)."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *path)))
