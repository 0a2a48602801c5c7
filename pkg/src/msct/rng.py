"""Seed derivation helpers.

Every random stream in the project is a child of one run seed, keyed by a
purpose tag, so that e.g. enabling augmentation cannot perturb the shuffle
stream. Child derivation is pure and platform independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_words(tags: tuple) -> list[int]:
    digest = hashlib.sha256(repr(tags).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Deterministic child generator for (seed, *tags).

    Tags may be strings or ints (e.g. ``child_rng(seed, "shuffle", epoch)``).
    Distinct tag tuples give statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_tag_words(tags)))
    return np.random.Generator(np.random.PCG64(ss))


def content_hash(*chunks: bytes) -> str:
    """SHA-256 hex digest over the concatenated byte chunks."""
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()
