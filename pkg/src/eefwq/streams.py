"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    """
    Return an independent generator for a named component.

    The same (root_seed, name) pair always yields the same stream, and streams
    with different names do not interfere with one another.
    """
    return np.random.default_rng([int(root_seed), zlib.crc32(name.encode("utf-8"))])


def device_substream(root_seed: int, name: str, index: int) -> np.random.Generator:
    """Per-device variant of :func:`substream`."""
    return np.random.default_rng([int(root_seed), zlib.crc32(name.encode("utf-8")), int(index)])
