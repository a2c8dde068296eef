import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed from a parent seed and a path of names."""
    h = hashlib.sha256(str(int(seed)).encode())
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
