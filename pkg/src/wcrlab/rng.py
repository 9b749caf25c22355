"""Counter-based splittable random streams.

Every stochastic routine in the package receives an explicit stream; nothing
owns hidden RNG state.  Streams are derived from a master seed plus an integer
path, so stream(seed, 3) is the same generator no matter how many other
streams were created before it.  Philox is counter-based, which makes the
derivation cheap and order-independent.
"""

import numpy as np

__all__ = ["stream"]


def stream(seed, *path):
    """Return a Generator deterministically derived from ``seed`` and ``path``.

    Parameters
    ----------
    seed : int
        Master seed of the experiment.
    *path : int
        Sub-stream coordinates, e.g. a replicate index, or (grid index,
        replicate index).

    Returns
    -------
    numpy.random.Generator
    """
    if seed is None:
        raise ValueError("seed must be an explicit integer, not None")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
