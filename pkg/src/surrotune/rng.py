"""Seeded random streams.

Everything random draws from a Philox (counter-based) generator keyed by the
64-bit run seed plus a fixed per-purpose stream offset, so independent
consumers never share or shift each other's sequences.
"""

import numpy as np

DATASET = 1
SPLIT = 2
INIT = 3
SAMPLING = 4
EXPLORE = 5
SHUFFLE = 6

_MASK64 = (1 << 64) - 1


def make_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    key = (int(seed) & _MASK64) | (((int(stream) << 32) | int(index)) << 64)
    return np.random.Generator(np.random.Philox(key=key))
