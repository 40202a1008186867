"""Deterministic random-stream derivation.

Every stochastic draw in the package flows through a substream keyed by a
tuple of integers (a user seed plus a purpose tag plus optional indices).
Streams are independent of iteration order and worker count, so a run's
noise is fully determined by its config: the corruption applied to window
17 of epoch 3 is the same whether batches are built serially or in
parallel.
"""

from __future__ import annotations

import numpy as np

# Purpose tags: the first key after the user-facing seed.
INIT = 1      # model parameter initialization
CORRUPT = 2   # per-window (tau, eps) draws
SAMPLE = 3    # DDIM initial noise
DATA = 4      # epoch shuffling
GEN = 5       # synthetic clip generation
PROBE = 6     # analysis probe windows
FEAT = 7      # metric feature extractor weights
PAIRS = 8     # diversity pair subsampling

_MASK = (1 << 63) - 1


def substream(*keys: int) -> np.random.Generator:
    """Return a fresh generator keyed by the given integer tuple."""
    return np.random.default_rng([int(k) & _MASK for k in keys])
