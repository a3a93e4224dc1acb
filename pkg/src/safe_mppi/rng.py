"""Counter-based random streams.

Every draw in a simulation is addressed by a tuple of integers (run seed,
stream tag, step, ...). The stream for a tuple is a Philox generator keyed by
that tuple, so results never depend on the order in which streams are
consumed or on how work is split between workers.
"""

import numpy as np

PLANT = 1
SENSOR = 2
MPPI = 3
RECTIFY = 4
INITIAL = 5


def stream(*keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return np.random.Generator(np.random.Philox(ss))
