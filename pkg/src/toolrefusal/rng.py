"""Named random substreams derived from a single experiment seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; identical (seed, name) give identical streams."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
