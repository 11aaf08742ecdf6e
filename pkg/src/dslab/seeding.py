"""Stable child-seed derivation."""

import hashlib

import numpy as np


def derive_seed(master: int, tag: str, *indices: int) -> int:
    """64-bit seed from (master, tag, indices); stable across processes and runs."""
    key = "/".join([str(int(master)), tag, *(str(int(i)) for i in indices)])
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


def rng_for(master: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, tag, *indices))
