"""Deterministic seed derivation (splitmix64 mixing)."""

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(base_seed: int, *keys: int) -> int:
    """Mix ``keys`` into ``base_seed``; distinct key tuples give uncorrelated streams."""
    h = splitmix64(int(base_seed) & _MASK)
    for k in keys:
        h = splitmix64(h ^ (int(k) & _MASK))
    return h


def rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys) if keys else int(seed) & _MASK)
