"""Seeded counter-based random streams.

All randomness (initialization, dropout masks, scene generation) comes from
Philox generators keyed by ``(seed, stream name, ...)`` so that results are
bit-reproducible and independent streams never share state.
"""

import zlib

import numpy as np


def make_rng(seed, *stream):
    """Return a Philox-backed generator for ``seed`` and an optional named stream."""
    key = [int(seed) & 0xFFFFFFFF]
    for part in stream:
        key.append(zlib.crc32(part.encode()) if isinstance(part, str) else int(part) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
