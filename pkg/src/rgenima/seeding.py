"""Seed derivation shared by every stochastic step.

Each purpose gets its own stream, ``derive_seed(root, "purpose", index...)``,
so adding or reordering work elsewhere never shifts another stream.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(root: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *parts))
