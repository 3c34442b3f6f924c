"""Seed splitting: every random stream in a run is derived from one master seed.

A sub-seed is the first 8 bytes of ``sha256("<seed>:<purpose>")`` read as a
big-endian unsigned integer.  Purposes are plain strings such as
``"torch-init"`` or ``"triplet:12:3"``, so streams never depend on the order
in which they are requested.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *purpose: object) -> int:
    key = ":".join([str(int(seed))] + [str(p) for p in purpose])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(seed: int, *purpose: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))
