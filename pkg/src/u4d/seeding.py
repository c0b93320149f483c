"""Deterministic RNG derivation from a single root seed.

Every subsystem pulls its generator through `subsystem_rng(root, name)`;
the name is hashed with crc32 into a SeedSequence spawn key, so streams
are independent, reproducible, and stable across platforms.
"""

import zlib

import numpy as np


def subsystem_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.SeedSequence(root_seed, spawn_key=(key,))


def subsystem_rng(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(subsystem_seed(root_seed, name))
