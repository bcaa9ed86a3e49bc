"""Child-seed derivation so each pipeline stage has its own reproducible stream.

``child_seed(master, stage, index)`` hashes the stage name with 64-bit FNV-1a,
xors it with the master seed and ``index * 0x9E3779B97F4A7C15``, and runs the
result through the splitmix64 finalizer.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def child_seed(master: int, stage: str, index: int = 0) -> int:
    return splitmix64((master & MASK64) ^ fnv1a64(stage) ^ ((index * GOLDEN) & MASK64))


def child_rng(master: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, stage, index))
