"""Paired-outcome PNS estimation, Wilson intervals and implicit-contract filtering."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import norm as _normal

from icr.simulator import Context

CONTRACT_SCHEMA = "icr.contracts/1"
ALL = "ALL"


class EmptySupportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# context predicates


@dataclass(frozen=True)
class Predicate:
    psi_id: str
    ic_id: str | None = None
    wealth_bucket: str | None = None  # "lo" | "hi"
    wealth_cut: float = math.nan

    def __call__(self, ctx: Context) -> bool:
        if self.ic_id is not None and ctx.ic_id != self.ic_id:
            return False
        if self.wealth_bucket is not None:
            hi = ctx.agg_wealth >= self.wealth_cut
            if hi != (self.wealth_bucket == "hi"):
                return False
        return True


def predicate_catalog(contexts: Sequence[Context]) -> dict[str, Predicate]:
    """TRUE, one predicate per IC, a global wealth split and IC x wealth conjunctions.

    The wealth cut is the median aggregate initial wealth of ``contexts``
    (normally the training contexts), frozen into the predicates.
    """
    ics = sorted({c.ic_id for c in contexts})
    cut = float(np.median([c.agg_wealth for c in contexts])) if contexts else math.nan
    cat = {"TRUE": Predicate("TRUE")}
    for ic in ics:
        cat[ic] = Predicate(ic, ic_id=ic)
    for b in ("lo", "hi"):
        cat[f"W{b}"] = Predicate(f"W{b}", wealth_bucket=b, wealth_cut=cut)
    for ic in ics:
        for b in ("lo", "hi"):
            cat[f"{ic}&W{b}"] = Predicate(f"{ic}&W{b}", ic_id=ic, wealth_bucket=b, wealth_cut=cut)
    return cat


def predicate_from_id(psi_id: str, wealth_cut: float = math.nan) -> Predicate:
    ic, bucket = None, None
    for part in psi_id.split("&"):
        if part == "TRUE":
            continue
        if part in ("Wlo", "Whi"):
            bucket = part[1:]
        else:
            ic = part
    return Predicate(psi_id, ic, bucket, wealth_cut)


# ---------------------------------------------------------------------------
# paired outcomes and estimation


@dataclass
class PairedOutcome:
    seed: int
    context_flags: Mapping[str, bool]
    y_treat: Mapping[tuple[str, str], int]  # (norm, group) -> bit under theta
    y_base: Mapping[tuple[str, str], int]  # same under theta0
    ic_id: str = ""


def resolve_groups(pair: PairedOutcome, norm_id: str, group_set) -> tuple[str, ...]:
    if group_set == ALL:
        gs = tuple(g for (n, g) in pair.y_treat if n == norm_id)
        if not gs:
            raise KeyError(f"no outcomes for norm {norm_id!r}")
        return gs
    return tuple(group_set) if not isinstance(group_set, str) else (group_set,)


def pns_event(pair: PairedOutcome, norm_id: str, group_set) -> bool:
    """Target-conjunction PNS event: every target group in band under theta, some target out under theta0."""
    gs = resolve_groups(pair, norm_id, group_set)
    treat_ok = all(pair.y_treat[(norm_id, g)] == 1 for g in gs)
    base_fails = any(pair.y_base[(norm_id, g)] == 0 for g in gs)
    return treat_ok and base_fails


@dataclass(frozen=True)
class PNSEstimate:
    k: int
    n: int
    value: float
    ci: tuple[float, float]
    level: float = 0.95

    def __str__(self) -> str:
        return f"{self.value:.3f} [{self.ci[0]:.3f}, {self.ci[1]:.3f}]"


def wilson_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n < 1 or k < 0 or k > n:
        raise ValueError(f"invalid binomial counts k={k}, n={n}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    z = float(_normal.ppf((1.0 + level) / 2.0))
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = p + z2 / (2.0 * n)
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n))
    lower = 0.0 if k == 0 else max(0.0, (centre - half) / denom)
    upper = 1.0 if k == n else min(1.0, (centre + half) / denom)
    return lower, upper


def estimate_pns(pairs: Iterable[PairedOutcome], psi: str, norm_id: str, group_set=ALL,
                 level: float = 0.95) -> PNSEstimate:
    sel = [pr for pr in pairs if pr.context_flags.get(psi, False)]
    if not sel:
        raise EmptySupportError(f"no pairs satisfy {psi!r}")
    k = sum(pns_event(pr, norm_id, group_set) for pr in sel)
    n = len(sel)
    return PNSEstimate(k, n, k / n, wilson_ci(k, n, level), level)


# ---------------------------------------------------------------------------
# contracts


def targets_label(group_set) -> str:
    if group_set == ALL:
        return ALL
    return "+".join(group_set) if not isinstance(group_set, str) else group_set


def parse_targets(label: str):
    return ALL if label == ALL else tuple(label.split("+"))


@dataclass
class Contract:
    theta: str
    theta0: str
    target_groups: object  # ALL or tuple of group ids
    psi: str
    norm_id: str
    estimate: PNSEstimate
    accountable: bool = False

    @property
    def support(self) -> int:
        return self.estimate.n

    @property
    def contract_id(self) -> str:
        return f"{self.norm_id}|{self.theta0}>{self.theta}|{targets_label(self.target_groups)}|{self.psi}"

    @property
    def task(self) -> tuple[str, str]:
        return self.theta0, self.norm_id


def filter_contracts(candidates: Iterable[Contract], n_min: int = 3, tau_pns: float = 0.8) -> list[Contract]:
    kept = []
    for c in candidates:
        if c.estimate.n >= n_min and c.estimate.value >= tau_pns:
            c.accountable = True
            kept.append(c)
    kept.sort(key=lambda c: (-c.estimate.value, -c.estimate.n, c.contract_id))
    return kept


def enumerate_contracts(pairs_by_arm: Mapping[tuple[str, str], Sequence[PairedOutcome]],
                        psis: Sequence[str], norm_groups: Mapping[str, Sequence[str]],
                        level: float = 0.95, n_min: int = 1,
                        single_groups: bool = True) -> list[Contract]:
    """Estimate every (theta0, theta, psi, norm, targets) clause with support >= ``n_min``.

    ``pairs_by_arm`` maps ``(theta, theta0)`` to the twin pairs for that arm.
    """
    out = []
    for (theta, theta0), pairs in sorted(pairs_by_arm.items()):
        for psi in psis:
            sel = [p for p in pairs if p.context_flags.get(psi, False)]
            if len(sel) < max(1, n_min):
                continue
            for norm_id, groups in norm_groups.items():
                sets = [ALL] + ([(g,) for g in groups] if single_groups else [])
                for gs in sets:
                    est = estimate_pns(sel, psi, norm_id, gs, level)
                    out.append(Contract(theta, theta0, gs, psi, norm_id, est))
    return out


CONTRACT_COLUMNS = ("contract_id", "norm", "baseline", "current", "group", "psi", "k", "n",
                    "pns", "ci_lower", "ci_upper", "level", "accountable", "display")


def save_contracts(contracts: Sequence[Contract], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={CONTRACT_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(CONTRACT_COLUMNS)
        for c in contracts:
            e = c.estimate
            w.writerow([c.contract_id, c.norm_id, c.theta0, c.theta, targets_label(c.target_groups), c.psi,
                        e.k, e.n, repr(e.value), repr(e.ci[0]), repr(e.ci[1]), repr(e.level),
                        int(c.accountable), str(e)])
    return path


def load_contracts(path: str | Path) -> list[Contract]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"#schema={CONTRACT_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        est = PNSEstimate(int(r["k"]), int(r["n"]), float(r["pns"]),
                          (float(r["ci_lower"]), float(r["ci_upper"])), float(r["level"]))
        out.append(Contract(r["current"], r["baseline"], parse_targets(r["group"]), r["psi"], r["norm"],
                            est, bool(int(r["accountable"]))))
    return out
