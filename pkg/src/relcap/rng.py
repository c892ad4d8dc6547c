"""Deterministic, splittable random streams.

Every source of randomness in the package (parameter init, dropout masks,
batch shuffling, corpus generation) draws from a stream addressed by a
root seed plus an integer path. Streams are derived with SeedSequence
spawn keys, so any stream can be reconstructed independently of the order
in which other streams were consumed. That is what makes training runs
bit-reproducible and resumable.
"""

from __future__ import annotations

import numpy as np

# Stream namespaces. Keep values stable: they are part of run reproducibility.
INIT = 0
DROPOUT = 1
SHUFFLE = 2
CORPUS = 3
DECODE = 4


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for (seed, path). Same arguments, same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
