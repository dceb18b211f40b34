"""Deterministic named RNG substreams.

Every stochastic element in the pipeline (data generation, parameter init,
dropout, batch shuffling, bootstrap resampling) draws from its own named
substream derived from one root seed, so any stage can be reproduced in
isolation without replaying the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> list[int]:
    # sha256 -> four uint32 words; stable across platforms and Python builds
    # (unlike hash(), which is salted per process).
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]


def substream(root_seed: int, *names: str) -> np.random.Generator:
    """Return a Generator for the substream identified by ``names``.

    The same (root_seed, names) pair always yields an identical stream;
    distinct names yield independent streams.
    """
    entropy: list[int] = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        entropy.extend(_stream_key(name))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
