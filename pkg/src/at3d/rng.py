"""Counter-based random streams.

All randomness in the package comes from numpy's Philox generator keyed
through a ``SeedSequence``.  A stream is identified by the run seed plus a
tuple of non-negative integers (the spawn key), so any consumer can derive
its own reproducible stream without sharing generator state:

    stream(seed, INIT, layer_index)          parameter initialisation
    stream(seed, ORDER, epoch)               per-epoch sample order
    stream(seed, SAMPLE, epoch, index)       clip sampling + augmentation
    stream(seed, EVAL, index)                evaluation clip starts
    stream(seed, DROPOUT, epoch, step)       dropout masks
    stream(seed, SYNTH, class, index)        synthetic video generation
"""

from __future__ import annotations

import numpy as np

INIT = 0
ORDER = 1
SAMPLE = 2
EVAL = 3
DROPOUT = 4
SYNTH = 5

SeedLike = int | tuple[int, ...]


def _split(seed: SeedLike) -> tuple[int, tuple[int, ...]]:
    if isinstance(seed, (tuple, list)):
        if not seed:
            raise ValueError("empty seed tuple")
        return int(seed[0]), tuple(int(k) for k in seed[1:])
    return int(seed), ()


def stream(seed: SeedLike, *key: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *key)``."""
    root, prefix = _split(seed)
    ss = np.random.SeedSequence(root, spawn_key=prefix + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def bit_generator(seed: SeedLike, *key: int) -> np.random.Philox:
    """The raw bit generator behind :func:`stream`, for oracle checks."""
    root, prefix = _split(seed)
    ss = np.random.SeedSequence(root, spawn_key=prefix + tuple(int(k) for k in key))
    return np.random.Philox(ss)
