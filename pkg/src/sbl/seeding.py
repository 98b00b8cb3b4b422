"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, name, ...)``; stable across runs and platforms."""
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(str(name).encode()) if isinstance(name, str) else int(name))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
