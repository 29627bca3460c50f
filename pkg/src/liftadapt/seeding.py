"""Named, independent random streams derived from one integer seed."""
import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator keyed by ``(seed, name, *keys)``; same key, same stream."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), tag, *(int(k) for k in keys)])
