"""Episode-by-regime outcome tables shared by Stage I, Stage II and the baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from icr.norms import NormBand
from icr.pns import PairedOutcome, Predicate
from icr.simulator import Context, EpisodeRecord, compute_outcomes


@dataclass
class OutcomeTable:
    """Outcome bits for a set of episodes under every simulated regime.

    ``bits[norm][regime]`` is an ``(n_episodes, n_groups)`` 0/1 array whose
    columns follow ``groups[norm]``. ``observed`` optionally names, per
    episode, the single arm a correlational analyst would have seen; when it
    is ``None`` both arms of every pair count as observed.
    """

    contexts: list[Context]
    seeds: list[int]
    flags: dict[str, np.ndarray]
    bits: dict[str, dict[str, np.ndarray]]
    groups: dict[str, tuple[str, ...]]
    observed: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.contexts)

    @property
    def ic_ids(self) -> list[str]:
        return [c.ic_id for c in self.contexts]

    @property
    def regimes(self) -> list[str]:
        first = next(iter(self.bits.values()), {})
        return sorted(first)

    def subset(self, idx: Sequence[int]) -> "OutcomeTable":
        idx = np.asarray(idx, dtype=int)
        return OutcomeTable(
            [self.contexts[i] for i in idx],
            [self.seeds[i] for i in idx],
            {k: v[idx] for k, v in self.flags.items()},
            {n: {r: a[idx] for r, a in arms.items()} for n, arms in self.bits.items()},
            dict(self.groups),
            None if self.observed is None else self.observed[idx],
        )

    def target_cols(self, norm_id: str, targets) -> np.ndarray:
        gs = self.groups[norm_id]
        if targets == "ALL":
            return np.arange(len(gs))
        return np.array([gs.index(g) for g in targets], dtype=int)

    def conj(self, norm_id: str, regime: str, targets) -> np.ndarray:
        """Per-episode 1 iff every target group is in band under ``regime``."""
        cols = self.target_cols(norm_id, targets)
        return self.bits[norm_id][regime][:, cols].all(axis=1)

    def pairs(self, theta: str, theta0: str) -> list[PairedOutcome]:
        out = []
        for e in range(len(self)):
            yt, yb = {}, {}
            for n, gs in self.groups.items():
                for j, g in enumerate(gs):
                    yt[(n, g)] = int(self.bits[n][theta][e, j])
                    yb[(n, g)] = int(self.bits[n][theta0][e, j])
            flags = {k: bool(v[e]) for k, v in self.flags.items()}
            out.append(PairedOutcome(self.seeds[e], flags, yt, yb, self.contexts[e].ic_id))
        return out


def table_from_records(records: Mapping[tuple[str, int], Mapping[str, EpisodeRecord]],
                       catalog: Mapping[str, NormBand], predicates: Mapping[str, Predicate],
                       q: float = 0.9) -> OutcomeTable:
    """Build a table from ``{(ic_id, seed): {regime_id: record}}``."""
    keys = sorted(records)
    contexts, seeds = [], []
    bits: dict[str, dict[str, list]] = {n: {} for n in catalog}
    for key in keys:
        arms = records[key]
        ctx = next(iter(arms.values())).x0
        contexts.append(ctx)
        seeds.append(int(key[1]))
        for rid, rec in sorted(arms.items()):
            oc = compute_outcomes(rec, catalog, q)
            for n, band in catalog.items():
                bits[n].setdefault(rid, []).append([oc[n].bits[g] for g in band.groups])
    flags = {pid: np.array([bool(p(c)) for c in contexts], dtype=bool) for pid, p in predicates.items()}
    groups = {n: band.groups for n, band in catalog.items()}
    arr = {n: {r: np.asarray(v, dtype=np.int8).reshape(len(keys), len(groups[n])) for r, v in arms.items()}
           for n, arms in bits.items()}
    return OutcomeTable(contexts, seeds, flags, arr, groups)
