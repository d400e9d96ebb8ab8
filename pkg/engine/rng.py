"""
Counter-based random streams
Every draw in the engine comes from a Philox generator keyed by integers
"""
from typing import List

import numpy as np


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """
    Build a Philox generator from a 64-bit seed and an optional integer key

    Args:
        seed: Run seed
        key: Extra integers (sequence index, step counter, ...)

    Returns:
        numpy Generator over Philox
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def child_streams(rng: np.random.Generator, count: int) -> List[np.random.Generator]:
    """
    Derive independent streams from a parent generator.

    The parent is advanced by exactly one draw regardless of count, and
    stream i is the same for every count > i.

    Args:
        rng: Parent generator
        count: Number of streams

    Returns:
        List of generators
    """
    if rng is None:
        raise ValueError("rng required")
    entropy = int(rng.integers(0, 2 ** 63))
    return [
        np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy, spawn_key=(i,))))
        for i in range(count)
    ]


def draw_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from a generator"""
    return int(rng.integers(0, 2 ** 63))
