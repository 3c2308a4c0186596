"""Deterministic seed derivation.

All randomness in a run flows from one root seed. Stages (and per-step
substreams) derive child seeds by hashing their name together with the
root seed, so adding a stage never perturbs the streams of another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(root_seed: int, *tags: object) -> int:
    """Hash ``root_seed`` with a sequence of stage tags into a 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root_seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little") & _MASK64


def derive_rng(root_seed: int, *tags: object) -> np.random.Generator:
    """A fresh generator seeded from ``derive_seed(root_seed, *tags)``."""
    return np.random.default_rng(derive_seed(root_seed, *tags))
