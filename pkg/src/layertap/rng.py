"""Deterministic, splittable random streams.

Every source of randomness in the library draws from a Philox
(counter-based) generator keyed by a root seed plus a readable path of
labels, via numpy's SeedSequence spawn keys. Two streams with different
paths are statistically independent; the same (seed, path) always yields
the same stream, on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _as_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Counter-based generator for (seed, path); path parts may be str or int."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_as_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
