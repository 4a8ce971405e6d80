"""Deterministic sub-seed derivation from a single root seed.

Each stage (data, init, noise, sampling, ...) gets its own stream derived by
mixing the root seed with a stable label hash through splitmix64. Changing how
many draws one stage makes therefore never perturbs another stage.
"""

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive(root: int, *labels) -> int:
    """Mix ``root`` with each label in turn; labels may be str or int."""
    state = splitmix64(int(root) & _MASK)
    for label in labels:
        if isinstance(label, str):
            token = zlib.crc32(label.encode("utf-8"))
        else:
            token = int(label) & _MASK
        state = splitmix64(state ^ token)
    return state


def rng(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive(root, *labels))
