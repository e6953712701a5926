"""Seeded random streams.

Every consumer derives its own generator from a root seed plus a path of
string/int keys, so streams never share state and adding a consumer does not
shift the draws of another one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, *keys)``."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    return int(stream(seed, *keys).integers(0, 2**63 - 1))
