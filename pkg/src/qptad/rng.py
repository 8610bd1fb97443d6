"""One seed for every random stream.

Streams are derived from ``(seed, name)`` so adding a new consumer never
shifts the numbers another consumer sees.
"""

import zlib

import numpy as np


def derive_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
