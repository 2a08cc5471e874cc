"""Seed derivation.

One master seed drives every random choice. Stages get their own seed by hashing a
label together with the master seed; injections get a counter-based Philox generator
keyed by (seed, layer, channel, ordinal) so draws never depend on scheduling.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, label: str) -> int:
    """Derive a 64-bit stage seed from the master seed and a label."""
    data = f"{master_seed & _MASK64}:{label}".encode()
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def injection_rng(master_seed: int, layer: int, channel: int, ordinal: int) -> np.random.Generator:
    """Generator for one injection, independent of every other injection."""
    seq = np.random.SeedSequence(master_seed & _MASK64, spawn_key=(layer, channel, ordinal))
    return np.random.Generator(np.random.Philox(seq))


def stage_rng(master_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, label))
