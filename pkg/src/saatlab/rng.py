"""Keyed deterministic random streams.

Every random decision in a run (init, shuffling, augmentation, attack
starts) draws from a generator derived from (run seed, purpose tag,
indices).  Streams are therefore independent of each other and of
execution order: replaying a run, or resuming it mid-way, regenerates
exactly the same draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _encode(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"rng tags must be nonnegative integers, got {tag}")
        return int(tag)
    if isinstance(tag, str):
        return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")
    raise TypeError(f"unsupported rng tag {tag!r}")


def stream(seed: int, *tags) -> np.random.Generator:
    """A fresh generator keyed by (seed, tags); same key, same stream."""
    entropy = [_encode(seed)] + [_encode(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
