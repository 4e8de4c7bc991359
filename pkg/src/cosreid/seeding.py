"""Deterministic seed derivation.

One master seed drives every random decision in a run.  Sub-seeds are derived
by hashing a namespace path, so adding a new consumer never shifts the stream
seen by an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *path: object) -> int:
    """Stable 32-bit sub-seed for ``(master, *path)``."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode("ascii"))
    for part in path:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:4], "little")


def rng_for(master: int, *path: object) -> np.random.Generator:
    """NumPy generator seeded from the namespaced derivation."""
    return np.random.default_rng(derive_seed(master, *path))
