"""Counter-based exogenous noise.

Every draw is addressed by ``(seed, shock type, step, user)``. The value at a
coordinate depends only on that address, never on how many draws were made
before it, so two worlds simulated from the same seed see identical shocks
whatever branches their policies take.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# Fixed shock-type ids; the id is part of the Philox counter, so never renumber.
SHOCK_TYPES = {
    "init_wealth": 1,
    "init_z": 2,
    "productivity": 3,
    "superstar": 4,
}

_KEY_TAG = 0x1C7_0001  # domain separation for the second key word


class NoiseStream:
    """Philox-backed stream with one sub-stream per (shock type, step).

    Within a sub-stream the i-th value is the i-th user's draw.
    """

    def __init__(self, seed: int, record: bool = False):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.record = record
        self.trace: dict[tuple[str, int], np.ndarray] = {}

    def _generator(self, shock: str, step: int) -> np.random.Generator:
        kind = SHOCK_TYPES[shock]
        bitgen = np.random.Philox(
            key=np.array([self.seed, _KEY_TAG], dtype=np.uint64),
            counter=np.array([0, 0, kind, step + 1], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def uniform(self, shock: str, step: int, n: int) -> np.ndarray:
        """``n`` uniforms in the open interval (0, 1)."""
        u = self._generator(shock, step).random(n)
        # random() is on [0, 1); nudge exact zeros so ndtri stays finite
        u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
        if self.record:
            self.trace[(shock, step)] = u.copy()
        return u

    def normal(self, shock: str, step: int, n: int) -> np.ndarray:
        return ndtri(self.uniform(shock, step, n))
