"""Deterministic random streams keyed by (seed, substream indices)."""

from __future__ import annotations

import numpy as np


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """A generator that depends only on the seed and the key tuple.

    Every stochastic site in the package derives its generator this way, so
    results are reproducible regardless of call interleaving.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))
