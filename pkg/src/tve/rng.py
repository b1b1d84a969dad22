"""Counter-based random streams keyed by (seed, ...) tuples.

Every consumer derives its own Philox stream from the root seed plus a key
path, so replications can run in any order or process and still draw the
same numbers.
"""

import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("stream keys must be non-negative")
    return k


def stream(seed, *keys):
    """A `numpy.random.Generator` for the stream identified by ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
