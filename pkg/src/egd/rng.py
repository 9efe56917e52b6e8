"""Counter-based random stream derivation.

Every random draw in a run comes from a stream keyed by
``(master seed, generation, phase, index)``.  Streams are independent of the
order in which individuals are processed, so batching, threading and resuming
from a checkpoint never change results.
"""

from __future__ import annotations

import numpy as np

# phase identifiers; part of the checkpoint contract, do not renumber
INIT = 0
SELECT = 1
PARENT_NOISE = 2
CROSSOVER = 3
FRAGMENT = 4
DENOISE_OFFSPRING = 5
DENOISE_PARENT = 6
BASELINE = 7
SWEEP = 8
DATASET = 9

SCHEME = "numpy.SeedSequence(seed, spawn_key=(generation, phase, index)) -> PCG64"


def stream(seed: int, generation: int, phase: int, index: int = 0) -> np.random.Generator:
    """Return the generator for one (generation, phase, index) cell."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(generation), int(phase), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def streams(seed: int, generation: int, phase: int, count: int, offset: int = 0) -> list[np.random.Generator]:
    return [stream(seed, generation, phase, offset + i) for i in range(count)]
