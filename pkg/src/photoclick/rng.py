"""Counter-based random streams keyed by (global seed, trajectory index, purpose)."""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1

# Separate purposes never share counter space.
STREAM_TRAJECTORY = 0
STREAM_DARK = 1
STREAM_PRIOR = 2
STREAM_MISC = 3


def make_rng(seed, index: int = 0, stream: int = STREAM_TRAJECTORY) -> np.random.Generator:
    """Philox generator for one trajectory.

    ``seed`` may be an int, a ``(seed, index)`` pair, or an existing Generator
    (returned unchanged).  The same key always yields the same draws, so
    results do not depend on how trajectories are split across workers.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        seed, index = seed
    key = ((int(seed) & _MASK) << 64) | (int(index) & _MASK)
    counter = [0, 0, 0, int(stream) & _MASK]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
