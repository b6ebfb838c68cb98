"""Seeded random streams.

Every random draw in the package comes from a :class:`numpy.random.Generator`
built here.  Streams are keyed by a tuple of non-negative integers (for
example ``(seed, run, round, policy)``) so that results do not depend on the
order in which runs, rounds or policies are scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np

# Fixed tags keep the streams for different purposes apart.
TAG_ENV = 1
TAG_ROUND = 2
TAG_POLICY = 3
TAG_TARGETS = 4
TAG_LOG = 5
TAG_IMPUTE = 6
TAG_ABLATION = 7
TAG_INIT = 8


def name_key(name: str) -> int:
    """Stable integer key for a string (CRC32, platform independent)."""
    return zlib.crc32(name.encode("utf-8"))


def stream(*keys: int) -> np.random.Generator:
    """Return an independent PCG64 generator for the given key path."""
    clean = [int(k) for k in keys]
    if any(k < 0 for k in clean):
        raise ValueError(f"stream keys must be non-negative, got {keys}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(clean)))


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return stream(0)
    return stream(int(rng))
