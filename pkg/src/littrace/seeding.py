"""Named deterministic RNG streams.

All randomness in an experiment flows from a single integer seed, fanned out
into independent streams by name (data split, parameter init, epoch shuffles,
dropout). Streams are stable across platforms and runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the RNG stream identified by (seed, name)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    tag = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
