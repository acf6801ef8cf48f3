"""Stable seed derivation.

Every random stream in the package is obtained from a root seed plus a tuple
of keys (purpose strings, level numbers, step counters). The mapping is a
SHA-256 hash, so it does not depend on Python's per-process hash salt or on
the order in which streams are requested.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *keys: object) -> int:
    text = repr((int(seed),) + tuple(keys)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def derive_rng(seed: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
