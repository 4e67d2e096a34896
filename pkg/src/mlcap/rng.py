"""Named substreams derived from one run seed.

Every source of randomness in the engine (parameter init, epoch shuffling,
synthetic data, dataset splitting) draws from its own substream so that the
streams never interleave: adding an epoch of shuffling can never change what
the initializer produced, and vice versa.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"init": 0, "shuffle": 1, "synth": 2, "split": 3}


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of ``seed``."""
    if name not in STREAMS:
        raise ValueError(f"unknown rng stream {name!r}; known: {sorted(STREAMS)}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name],))
    return np.random.default_rng(ss)
