"""Per-record random streams derived from (global seed, record key)."""

import hashlib

import numpy as np


def key_int(key) -> int:
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; processing order never matters."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [key_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
