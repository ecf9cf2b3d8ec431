"""Named, reproducible random substreams.

All randomness in a run flows from one integer seed. Independent concerns
(data, init, shuffle, augment, ...) each derive their own generator keyed by
name, so e.g. changing an ablation flag never perturbs the data stream.
crc32 keeps the name->key mapping stable across platforms and Python builds
(hash() is salted and unusable here).
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed, *names):
    """Generator for (seed, *names); names may mix strings and ints."""
    keys = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            keys.append(zlib.crc32(name.encode("utf-8")))
        else:
            keys.append(int(name) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))
