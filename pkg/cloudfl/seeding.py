"""Seed derivation: every random stream is a pure function of the root seed and a key path."""
import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        key = int(key)
        return key if key >= 0 else key & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(root: int, *keys) -> int:
    """Stable 63-bit seed for (root, *keys), independent of call order or scheduling."""
    sequence = np.random.SeedSequence([_key_to_int(root), *(_key_to_int(k) for k in keys)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1


def rng_for(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
