"""Named RNG sub-streams derived from one global seed."""

from __future__ import annotations

import zlib

import numpy as np


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for stream ``name`` (and optional integer keys)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag(name), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(0, 2**63 - 1))
