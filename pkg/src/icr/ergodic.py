"""Two-state Markov chain used to sanity-check time averages against the stationary law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TwoStateChain:
    """``P(0 -> 1) = a`` and ``P(1 -> 0) = b``."""

    a: float
    b: float

    def __post_init__(self):
        if not (0 < self.a <= 1 and 0 < self.b <= 1):
            raise ValueError("transition probabilities must lie in (0, 1]")

    @property
    def stationary(self) -> np.ndarray:
        return np.array([self.b, self.a]) / (self.a + self.b)

    def expectation(self, stat: np.ndarray) -> float:
        return float(self.stationary @ np.asarray(stat, dtype=float))

    def sample(self, n_steps: int, seed: int, x0: int = 0) -> np.ndarray:
        u = np.random.default_rng(seed).random(n_steps)
        x = np.empty(n_steps, dtype=np.int8)
        s = x0
        for t in range(n_steps):
            s = int(u[t] < self.a) if s == 0 else int(u[t] >= self.b)
            x[t] = s
        return x

    def time_average(self, stat: np.ndarray, n_steps: int, seed: int, x0: int = 0) -> float:
        return float(np.asarray(stat, dtype=float)[self.sample(n_steps, seed, x0)].mean())
