"""Counter-based random streams.

Every random draw in a run comes from a generator keyed by
``(seed, purpose, *indices)``, so a schedule or a client's stochastic
gradients at round ``t`` never depend on what was evaluated before them.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "pattern": 0,
    "epoch": 1,
    "grad": 2,
    "problem": 3,
}


class Streams:
    """Factory for independent Philox generators derived from one master seed."""

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = seed

    def get(self, purpose: str, *keys: int) -> np.random.Generator:
        try:
            tag = PURPOSES[purpose]
        except KeyError:
            raise ValueError(f"unknown stream purpose {purpose!r}") from None
        entropy = [self.seed, tag, *(int(k) for k in keys)]
        if any(k < 0 for k in entropy):
            raise ValueError(f"stream keys must be non-negative, got {entropy}")
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def pattern(self, round_index: int) -> np.random.Generator:
        return self.get("pattern", round_index)

    def epoch(self, epoch_index: int) -> np.random.Generator:
        return self.get("epoch", epoch_index)

    def grad(self, round_index: int, client: int) -> np.random.Generator:
        return self.get("grad", round_index, client)

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed})"
