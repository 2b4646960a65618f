"""Seed derivation.

All randomness comes from numpy's PCG64 generator. A stream is identified by
the master seed plus a purpose tag such as ``("init",)`` or
``("attack", epoch, step)``; tags are hashed with SHA-256 into the
``SeedSequence`` entropy, so adding a new consumer never shifts the draws of
an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_words(tag) -> list[int]:
    digest = hashlib.sha256(repr(tuple(tag)).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def derive_rng(seed: int, *tag) -> np.random.Generator:
    seed = int(seed) & _MASK64
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_tag_words(tag)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *tag) -> int:
    """A 63-bit integer seed for APIs that want a plain integer."""
    return int(derive_rng(seed, *tag).integers(0, 2**63 - 1))
