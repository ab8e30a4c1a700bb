"""Seed derivation.

Every random stream is derived from one root seed plus a tuple of keys
(component name, index, session id, ...). Keys are hashed so that streams
are stable across runs and independent of the order they are requested in.
"""
import hashlib

import numpy as np


def derive_seed(seed, *keys):
    h = hashlib.blake2b(digest_size=16)
    h.update(repr(int(seed) if isinstance(seed, (int, np.integer)) else seed).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed, *keys):
    """Return a numpy Generator for the stream ``(seed, *keys)``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
