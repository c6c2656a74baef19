"""Seed fan-out.

Every random stream in a run is derived from the master seed plus a stage
name and optional integer/string keys, so adding a stage or an algorithm
never shifts the draws seen by another one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_rng(master_seed: int, stage: str, *keys: int | str) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, stage, *keys)``."""
    entropy = [_key_to_int(master_seed), _key_to_int(stage)]
    entropy.extend(_key_to_int(k) for k in keys)
    return np.random.default_rng(entropy)


def derive_seed(master_seed: int, stage: str, *keys: int | str) -> int:
    """Integer seed for code paths that take a seed rather than a generator."""
    return int(derive_rng(master_seed, stage, *keys).integers(0, 2**63 - 1))
