"""Named, independent random streams keyed by (seed, purpose, *ids)."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    tag = zlib.crc32(purpose.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, ids)]))
