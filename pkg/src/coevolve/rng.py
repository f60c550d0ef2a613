"""Seeded, splittable random streams.

Every consumer of randomness asks for its own stream keyed by ``(seed, *keys)``
so that changing how much randomness one component draws never shifts another
component's draws.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream named by ``keys``."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for the stream named by ``keys``."""
    return int(make_rng(seed, *keys).integers(0, 2**63 - 1))
