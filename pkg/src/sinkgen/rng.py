"""Counter-based random streams, keyed so every consumer is independent.

Sampling chain i uses the Philox key (master_seed, i). Non-chain consumers
(training shuffles, weight init, dataset generation, ...) use reserved
indices far above any realistic chain count.
"""

from __future__ import annotations

import numpy as np

_RESERVED_BASE = 1 << 40

TRAIN = _RESERVED_BASE
INIT = _RESERVED_BASE + 1
VAL = _RESERVED_BASE + 2
DATA = _RESERVED_BASE + 3
SURROGATE_T = _RESERVED_BASE + 4
SURROGATE_P = _RESERVED_BASE + 5
CMA = _RESERVED_BASE + 6


def stream(master_seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for (master_seed, index)."""
    key = np.array([np.uint64(master_seed), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
