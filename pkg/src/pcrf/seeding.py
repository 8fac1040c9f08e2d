"""Deterministic per-purpose random streams derived from one user seed."""

import numpy as np

# Fixed stream ids; renumbering would silently change every seeded run.
STREAMS = {"init": 0, "dropout": 1, "shuffle": 2, "synth": 3}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose.

    The same (seed, name) pair always yields the same stream, and distinct
    names never share state, so e.g. adding dropout draws cannot perturb
    batch shuffling.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))
