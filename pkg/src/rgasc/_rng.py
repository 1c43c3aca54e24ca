import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of a master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))))
