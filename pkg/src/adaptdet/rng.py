"""Named child random streams derived from one root seed.

Each consumer asks for its own stream by name, so adding a consumer never
shifts the draws another one sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(*names) -> list[int]:
    key = []
    for n in names:
        key.append(int(n) if isinstance(n, (int, np.integer)) else zlib.crc32(str(n).encode()))
    return key


def child(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + stream_key(*names))
