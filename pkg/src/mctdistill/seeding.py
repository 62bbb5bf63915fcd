"""Per-purpose seeds derived from one master seed."""

import zlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """A 32-bit seed for the named stream; independent across names, stable across runs."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])
