"""Sub-seed derivation. All randomness in segperf flows from one root seed."""

import hashlib

import numpy as np


def derive_seed(root: int, stage: str, *parts: object) -> int:
    """Stable 63-bit seed for ``(root, stage, *parts)``; independent of PYTHONHASHSEED."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    h.update(b"\x00" + stage.encode())
    for part in parts:
        h.update(b"\x00" + str(part).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rng_for(root: int, stage: str, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage, *parts))
