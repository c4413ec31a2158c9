"""Seed derivation.

All randomness in the package flows through numpy's ``SeedSequence`` hashing
into a ``PCG64`` bit generator. A stream is identified by a tuple of keys
(master seed, stage name, step, index, ...); strings are reduced to 64-bit
integers with SHA-256 so that keys are stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

U64_MASK = (1 << 64) - 1


def _key_words(key) -> list[int]:
    if isinstance(key, (bool, np.bool_)):
        key = int(key)
    if isinstance(key, (int, np.integer)):
        key = int(key)
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        # SeedSequence accepts arbitrary-size ints but we split into u32 words
        # explicitly so the mixing is independent of numpy's int coercion.
        words = []
        while True:
            words.append(key & 0xFFFFFFFF)
            key >>= 32
            if not key:
                break
        return [len(words)] + words
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return [0xFFFFFFFF, int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little")]
    raise TypeError(f"unsupported seed key type {type(key).__name__}")


def seed_sequence(*keys) -> np.random.SeedSequence:
    entropy: list[int] = []
    for k in keys:
        entropy.extend(_key_words(k))
    return np.random.SeedSequence(entropy)


def derive_seed(*keys) -> int:
    """Return a 64-bit seed that is a pure function of ``keys``."""
    return int(seed_sequence(*keys).generate_state(1, np.uint64)[0])


def make_rng(*keys) -> np.random.Generator:
    """PCG64 generator keyed by ``keys``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(*keys)))


def stage_seed(master: int, stage: str) -> int:
    """Seed for a pipeline stage: a hash of (master seed, stage name)."""
    return derive_seed(int(master) & U64_MASK, stage)
