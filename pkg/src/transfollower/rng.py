"""Seeded counter-based random streams.

All randomness goes through Philox generators keyed by ``(seed, *stream)``, so a
stream's draws never depend on what other streams consumed. Stream keys in use:

* ``(seed, 0)``          model parameter initialization, in construction order
* ``(seed, 1, epoch)``   minibatch shuffling for one epoch
* ``(seed, 2, epoch)``   dropout masks for one epoch, drawn in forward order
* ``(seed, 3, i)``       synthetic event ``i``
* ``(seed, 4)``          dataset split shuffle
* ``(seed, 5)``          genetic algorithm
"""

from __future__ import annotations

import numpy as np

INIT, SHUFFLE, DROPOUT, SYNTH_EVENT, SPLIT, GA = range(6)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    entropy = [int(seed)] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
