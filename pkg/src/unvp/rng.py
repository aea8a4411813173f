"""Named random streams so that adding a consumer never shifts another's draws."""
from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent, reproducible stream for (seed, purpose, counters...)."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(words)
