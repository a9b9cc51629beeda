"""Counter-based random streams.

Every random draw in the samplers comes from a Philox generator keyed by the
run seed plus a tuple describing *where* the draw happens (purpose, sequence
time, element time, ...).  Re-running with the same seed reproduces every
draw bit-for-bit, and draws at different keys are independent.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    k = int(k)
    if k < 0:
        raise ValueError("key parts must be non-negative")
    return k


class KeyedRNG:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, *key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_part(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *key) -> "KeyedRNG":
        """A derived stream family (e.g. one per ReDeNoise iteration)."""
        seed = int(self.generator("child", *key).integers(2**63))
        return KeyedRNG(seed)

    def __repr__(self):
        return f"KeyedRNG({self.seed})"


def as_keyed(rng) -> KeyedRNG:
    if isinstance(rng, KeyedRNG):
        return rng
    if isinstance(rng, (int, np.integer)):
        return KeyedRNG(int(rng))
    if isinstance(rng, np.random.Generator):
        return KeyedRNG(int(rng.integers(2**63)))
    raise TypeError(f"cannot derive a keyed stream from {type(rng).__name__}")
