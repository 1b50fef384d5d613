"""Counter-based random streams keyed by integer tuples.

Every draw in the package comes from ``stream(seed, *key)``, so a run is
reproducible and independent of the order in which steps are scheduled.
"""
import numpy as np

# stream ids
SIM_BIRTH, SIM_DEATH, SIM_DETECT, SIM_CLUTTER, SIM_PERM, SIM_STATE = range(6)
SMC_RESAMPLE, SMC_BIRTH, SMC_DEATH, SMC_ASSOC = range(10, 14)


def stream(seed, *key):
    """Return a Philox generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, key)])
    return np.random.Generator(np.random.Philox(ss))
