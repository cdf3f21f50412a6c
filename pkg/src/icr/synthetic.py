"""Synthetic confounded outcome tables.

A hidden binary state ``U`` drives both which regime an analyst would observe
and whether the norm is attained. Wealth shifts the odds of ``U``, so
predicates on wealth carry real signal.

Regimes:

* ``B`` (baseline): attains iff ``U = 1``.
* ``S`` (spurious): identical to ``B`` in every world, so its PNS is 0, yet it
  is mostly observed when ``U = 1`` and therefore looks strongly correlated
  with attainment.
* ``G`` (genuine): attains iff ``U = 0``, i.e. it fixes exactly the episodes the
  baseline misses; it is assigned at random, rarely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icr.outcomes import OutcomeTable
from icr.pns import predicate_catalog
from icr.simulator import Context

SYN_NORM = "SYN"
SYN_GROUPS = ("low", "high")
BASELINE, SPURIOUS, GENUINE = "B", "S", "G"


@dataclass(frozen=True)
class ConfoundedSpec:
    n_train: int = 200
    n_val: int = 100
    n_test: int = 200
    p_u_lo: float = 0.1  # P(U=1) for low-wealth contexts
    p_u_hi: float = 0.9
    p_genuine: float = 0.1  # share of episodes observed under G
    p_follow: float = 0.9  # P(observed arm tracks U) among the rest
    flip: float = 0.0  # independent per-bit noise


def _split(rng: np.random.Generator, n: int, seed0: int, spec: ConfoundedSpec):
    w = rng.random(n)
    u = rng.random(n) < np.where(w < 0.5, spec.p_u_lo, spec.p_u_hi)
    g = rng.random(n) < spec.p_genuine
    follow = rng.random(n) < spec.p_follow
    track_s = np.where(follow, u, ~u)
    observed = np.where(g, GENUINE, np.where(track_s, SPURIOUS, BASELINE))
    y = {BASELINE: u, SPURIOUS: u, GENUINE: ~u}
    bits = {}
    for r, v in y.items():
        col = np.repeat(v[:, None], len(SYN_GROUPS), axis=1)
        if spec.flip > 0:
            col = col ^ (rng.random(col.shape) < spec.flip)
        bits[r] = col.astype(np.int8)
    contexts = [Context("SYN", float(x), (float(x),) * 3) for x in w]
    seeds = list(range(seed0, seed0 + n))
    return contexts, seeds, bits, observed, u


def confounded_tables(seed: int, spec: ConfoundedSpec = ConfoundedSpec()) -> dict[str, OutcomeTable]:
    """``{"train", "val", "test"}`` tables with disjoint episode ids and shared predicates."""
    rng = np.random.default_rng(seed)
    raw = {}
    offset = 0
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        raw[name] = _split(rng, n, offset, spec)
        offset += n
    preds = predicate_catalog(raw["train"][0])
    out = {}
    for name, (ctx, seeds, bits, observed, u) in raw.items():
        flags = {pid: np.array([p(c) for c in ctx], dtype=bool) for pid, p in preds.items()}
        out[name] = OutcomeTable(ctx, seeds, flags, {SYN_NORM: bits}, {SYN_NORM: SYN_GROUPS}, observed)
    return out
