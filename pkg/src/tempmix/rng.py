"""Seed derivation.

Every random stream is a Philox (counter-based) generator keyed by the run's
root seed and a purpose tag, e.g. ``make_rng(seed, "sample")``.  Arms of an
experiment that share a root seed therefore see common random numbers.
"""

from __future__ import annotations

import zlib

import numpy as np


def tag_key(tag: str | int) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(tag.encode("utf-8"))


def make_rng(seed: int, *tags: str | int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed), *(tag_key(t) for t in tags)])
    return np.random.Generator(np.random.Philox(seq))
