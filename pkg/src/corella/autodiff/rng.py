"""Seeded random streams.

All randomness goes through Philox, a counter-based generator, so a seed
pins the exact sample stream regardless of platform defaults.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"


def make_rng(seed: int, *stream: str) -> np.random.Generator:
    """Generator for ``seed``; extra string tags select independent sub-streams."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if stream:
        digest = hashlib.sha256("/".join(stream).encode()).digest()
        key = [seed, int.from_bytes(digest[:8], "little")]
    else:
        key = [seed, 0]
    return np.random.Generator(np.random.Philox(key=key))
