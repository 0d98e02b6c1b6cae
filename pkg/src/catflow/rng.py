"""Hierarchical RNG streams derived from a single root seed."""

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for ``(purpose, *indices)`` under ``seed``.

    The same arguments always give the same stream, and streams for
    different purposes/steps do not overlap.
    """
    key = (purpose_key(purpose),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
