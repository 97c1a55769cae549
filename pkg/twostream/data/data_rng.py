#!/usr/bin/env python3

"""
Named, splittable random streams.

Every random draw in twostream comes from numpy's PCG64 bit generator seeded through a SeedSequence of
(global seed, stream id, keys...), so any example, epoch or batch can be regenerated on its own and results do
not depend on processing order.
"""

import numpy as np

from twostream.errors import ContractError


PRNG_NAME = "numpy.PCG64/SeedSequence(seed, stream, *keys)"

STREAMS = {
    "prototypes": 0,
    "train": 1,
    "val": 2,
    "test": 3,
    "subset": 4,
    "mask": 5,
    "negative": 6,
    "shuffle": 7,
    "task": 8,
    "init": 9,
    "dropout": 10,
    "sample": 11,
    "eval": 12,
    "head": 13,
}


def derive_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """
    :param seed: Global seed
    :param stream: One of STREAMS
    :param keys: Further non-negative integers (example id, epoch, ...)
    :return: An independent generator for this (seed, stream, keys) combination
    """
    if stream not in STREAMS:
        raise ContractError(f"unknown random stream '{stream}'")
    entropy = [int(seed), STREAMS[stream]] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ContractError(f"random stream keys must be non-negative, got {entropy}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, stream: str, *keys: int) -> int:
    """A 63-bit integer seed drawn from a derived stream."""
    return int(derive_rng(seed, stream, *keys).integers(0, 2 ** 63 - 1))
