"""Deterministic random number generation.

Every random draw in the package flows through numpy's PCG64 generator
seeded from a SeedSequence: a named, portable algorithm whose streams are
identical for identical seeds on every supported platform. Independent
concerns (weight init, epoch shuffling, augmentation) get independent
spawned streams rather than sharing one generator, so adding draws to one
concern never perturbs another.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """`count` independent generators derived from one root seed."""
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]
