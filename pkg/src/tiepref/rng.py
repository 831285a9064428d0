"""Named, independently seeded random substreams.

All randomness in the package flows from one integer seed.  Each consumer
asks for a substream by name plus optional integer keys (prompt id, epoch,
...), so adding draws to one stream never perturbs another.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "pairs": 1,
    "labels": 2,
    "ties": 3,
    "truth": 4,
    "init": 5,
    "shuffle": 6,
    "eval": 7,
    "experiment": 8,
}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name], *map(int, keys)))
    return np.random.Generator(np.random.PCG64(ss))
