"""Deterministic random-stream derivation.

One root seed fans out into named streams so that every consumer (weight
init, rollouts, estimator draws, evaluation) owns an independent generator
whose state depends only on the root seed and the stream name. Names are
hashed with crc32 (stable across processes, unlike ``hash``).
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: object) -> np.random.Generator:
    """Return the generator for the stream identified by ``names``.

    Integers are used directly as entropy words; everything else goes
    through crc32 of its string form. Repeated calls with the same
    arguments return identically-seeded generators.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)) and not isinstance(name, bool):
            words.append(int(name) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))
