"""Reproducible stream derivation.

Every replication gets its own numpy Generator seeded by a splitmix64 hash
of (master_seed, n, replication, tag).  The mixing function is fixed here so
that ladder entries and worker pools always see the same streams regardless
of scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One round of the splitmix64 output function (Steele et al.)."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _tag_word(tag: str) -> int:
    return int.from_bytes(hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(master_seed: int, n: int, rep: int, tag: str) -> int:
    """64-bit stream id for a (ladder entry, replication, purpose) triple."""
    h = master_seed & _MASK
    for word in (n & _MASK, rep & _MASK, _tag_word(tag)):
        h = splitmix64(h ^ word)
    return h


def stream(master_seed: int, n: int, rep: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, n, rep, tag))
