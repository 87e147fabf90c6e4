"""Reproducible random streams.

Every stream is derived from a master seed plus a tuple of integer tags
(experiment tag, chunk index, ...) through :class:`numpy.random.SeedSequence`
and fed into the counter-based Philox generator, so two different tag
tuples never share a stream and results do not depend on the order in
which streams are requested.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def tag(name: str) -> int:
    """Stable 32-bit integer tag for a string (crc32)."""
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *tags: int | str) -> np.random.Generator:
    """Generator for ``(seed, *tags)``; string tags are hashed with :func:`tag`."""
    key = tuple(tag(t) if isinstance(t, str) else int(t) for t in tags)
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return stream(int(rng))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators of ``rng``."""
    return list(rng.spawn(n))
