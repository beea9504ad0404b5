"""Seed handling. Every stochastic routine takes an explicit seed.

The generator is numpy's PCG64 (``numpy.random.Generator``), seeded through
``SeedSequence``. Seeds may be ints or (nested) tuples of ints such as
``(seed, stream, step)``; each distinct tuple is an independent stream.
"""
from __future__ import annotations

import numpy as np

GENERATOR = "PCG64"
_MASK = 0xFFFFFFFFFFFFFFFF


def _flatten(seed) -> list[int]:
    if isinstance(seed, (tuple, list)):
        # length prefix keeps (1, (2, 3)) and ((1, 2), 3) apart
        out = [len(seed)]
        for s in seed:
            out.extend(_flatten(s))
        return out
    return [int(seed) & _MASK]


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    entropy = _flatten(seed) if isinstance(seed, (tuple, list)) else int(seed) & _MASK
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
