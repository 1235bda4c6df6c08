"""Deterministic child-seed derivation (splitmix64 mixing)."""
from __future__ import annotations

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _key_int(key) -> int:
    if isinstance(key, int):
        return key & _MASK
    # stable across interpreter runs, unlike hash()
    h = 0xCBF29CE484222325
    for b in str(key).encode():
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


def derive_seed(master: int, *keys) -> int:
    """Child seed for ``keys`` under ``master``; result fits in 63 bits."""
    s = splitmix64(master & _MASK)
    for k in keys:
        s = splitmix64(s ^ _key_int(k))
    return s >> 1
