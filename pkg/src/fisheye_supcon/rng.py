"""Named, portable random substreams.

Every stage draws from a Philox (counter-based) generator keyed by the run
seed, a stage name and optional integer indices, so streams are identical
across platforms and independent of evaluation order.
"""

import zlib

import numpy as np


def stage_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for ``(seed, name, *indices)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence([int(seed), stage_key(name), *[int(i) for i in indices]])
    return np.random.Generator(np.random.Philox(ss))
