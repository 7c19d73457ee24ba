"""Deterministic random-stream management.

Every run derives all of its randomness from a single integer seed. Each
independent consumer (data generation, model init, per-learner shuffling,
gradient noise, key generation) pulls from its own named substream, so adding
a new consumer never perturbs the draws seen by existing ones.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Return the generator for the substream identified by ``path``.

    ``path`` components may be strings (stream names) or integers (learner
    index, round number). The same (seed, path) always yields the same
    stream, on any platform.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
