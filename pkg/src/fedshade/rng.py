"""Counter-based random streams.

Every stochastic call site asks for its own generator keyed by
``(master_seed, *path)``; the path is a tuple of ints and string tags such as
``(round, client_id, "train")``.  Streams are independent of call order, so
running clients in any order or on any number of threads gives the same draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError(f"stream path entries must be non-negative, got {value}")
    return value


def stream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Philox generator keyed by the seed and a path of ints / tags."""
    # length prefix: SeedSequence treats trailing zero words as absent
    words = [len(path), _word(master_seed), *(_word(p) for p in path)]
    key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
