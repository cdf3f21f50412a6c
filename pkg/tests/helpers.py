"""Small hand-built outcome tables for router and baseline tests."""

from __future__ import annotations

import numpy as np

from icr.outcomes import OutcomeTable
from icr.simulator import Context


def make_table(ic_ids, flags, bits, seed0=0, groups=("low", "high"), norm="N", observed=None):
    """``flags``: psi -> list of bools; ``bits``: regime -> list of per-episode group bits (or scalars)."""
    n = len(ic_ids)
    ctx = [Context(ic, float(i), (1.0, 1.0, 1.0)) for i, ic in enumerate(ic_ids)]
    arr = {}
    for r, v in bits.items():
        a = np.asarray(v, dtype=np.int8)
        arr[r] = np.repeat(a[:, None], len(groups), axis=1) if a.ndim == 1 else a
    return OutcomeTable(ctx, list(range(seed0, seed0 + n)),
                        {k: np.asarray(v, dtype=bool) for k, v in flags.items()},
                        {norm: arr}, {norm: tuple(groups)},
                        None if observed is None else np.asarray(observed))
