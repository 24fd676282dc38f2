"""
RNG Streams Module
Counter-based random substreams keyed by (master seed, purpose tag, index)
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

SeedLike = Union[int, np.random.Generator]


def hash64(tag: str) -> int:
    """Map a purpose tag to a stable unsigned 64-bit integer."""
    if not tag:
        raise ValueError("substream tag must be non-empty")
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def substream(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """
    Independent Philox generator for one (master_seed, tag, index) key.

    The same key always replays the same stream, whatever else was drawn
    before it or on which thread.
    """
    if master_seed < 0 or index < 0:
        raise ValueError("master_seed and index must be non-negative")
    seq = np.random.SeedSequence([int(master_seed), hash64(tag), int(index)])
    return np.random.Generator(np.random.Philox(seq))


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Accept an int seed or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return substream(int(seed), "default", 0)


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from a generator for keying nested substreams."""
    return int(rng.integers(0, 2**63 - 1))
