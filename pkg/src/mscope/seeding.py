"""Deterministic RNG substreams.

Every randomized stage derives its generator from (run seed, purpose tags),
so work items can be processed in any order or on any worker while still
producing identical bytes.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(seed: int, *tags) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
