"""Ablation routers: correlation, coverage, hybrid, majority and random.

The greedy baselines reuse :func:`icr.router.learn_router` unchanged and only
swap the scorer that fills the ``gain[rule, bucket]`` matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from icr.outcomes import OutcomeTable
from icr.pns import ALL, Contract
from icr.router import BucketSet, Router, RouterConfig, Rule, learn_router, rule_from_contract

METHODS = ("pns_greedy", "pns_greedy_pruned", "corr", "corr_pruned", "coverage", "hybrid", "majority", "random")


class DegenerateCorrelationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    alpha_hybrid: float = 0.7
    rng_seed: int = 42
    router: RouterConfig = field(default_factory=RouterConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha_hybrid <= 1.0:
            raise ValueError("alpha_hybrid must lie in [0, 1]")


def pearson_r(x: Sequence[float], y: Sequence[float], warn: bool = True) -> float:
    """Product-moment correlation; 0.0 when either series has no variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if len(x) < 2:
        if warn:
            warnings.warn("fewer than two points; correlation set to 0", DegenerateCorrelationWarning, stacklevel=2)
        return 0.0
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx <= 0.0 or syy <= 0.0:
        if warn:
            warnings.warn("zero variance; correlation set to 0", DegenerateCorrelationWarning, stacklevel=2)
        return 0.0
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# per-episode samples seen by a correlational analyst


def _treatment_samples(rule: Rule, table: OutcomeTable, task: tuple[str, str], sel: np.ndarray):
    """``(x, y)`` over the selected episodes: x marks the treated arm, y the target conjunction.

    With an ``observed`` column only the arm actually seen in each episode is
    used (episodes observed under some third regime are skipped); otherwise
    both twin arms contribute one sample each.
    """
    theta0, norm_id = task
    yt = table.conj(norm_id, rule.theta, rule.targets)[sel]
    yb = table.conj(norm_id, theta0, rule.targets)[sel]
    if table.observed is None:
        x = np.r_[np.ones(len(yt)), np.zeros(len(yb))]
        return x, np.r_[yt, yb].astype(float)
    obs = np.asarray(table.observed)[sel]
    is_t, is_b = obs == rule.theta, obs == theta0
    keep = is_t | is_b
    y = np.where(is_t, yt, yb)[keep].astype(float)
    return is_t[keep].astype(float), y


def _bucket_scores(rules, table, task, labels, nb, config, fn) -> np.ndarray:
    out = np.zeros((len(rules), nb))
    for i, r in enumerate(rules):
        match = table.flags[r.psi]
        for b in range(nb):
            sel = match & (labels == b)
            if int(sel.sum()) >= max(1, config.n_min_bucket):
                out[i, b] = fn(r, sel)
    return out


def corr_scorer(rules, table, task, labels, nb, config) -> np.ndarray:
    def fn(r, sel):
        x, y = _treatment_samples(r, table, task, sel)
        return pearson_r(x, y, warn=False)
    return _bucket_scores(rules, table, task, labels, nb, config, fn)


def coverage_scorer(rules, table, task, labels, nb, config) -> np.ndarray:
    """Treated-arm target-conjunction hit rate, baseline ignored."""
    _, norm_id = task

    def fn(r, sel):
        hit = table.conj(norm_id, r.theta, r.targets)
        if table.observed is not None:
            sel = sel & (np.asarray(table.observed) == r.theta)
            if not sel.any():
                return 0.0
        return float(hit[sel].mean())
    return _bucket_scores(rules, table, task, labels, nb, config, fn)


def hybrid_scorer(alpha: float):
    def scorer(rules, table, task, labels, nb, config) -> np.ndarray:
        cov = coverage_scorer(rules, table, task, labels, nb, config)
        r = corr_scorer(rules, table, task, labels, nb, config)
        return alpha * cov + (1.0 - alpha) * r
    return scorer


# ---------------------------------------------------------------------------
# routers


def _rules(candidates: Sequence[Contract | Rule]) -> list[Rule]:
    return [rule_from_contract(c) if isinstance(c, Contract) else c for c in candidates]


def corr_greedy(candidates, train: OutcomeTable, val: OutcomeTable, buckets: BucketSet,
                config: BaselineConfig = BaselineConfig(), task=None, pruned: bool = False) -> Router:
    return learn_router(candidates, train, val, buckets, config.router, task, prune=pruned,
                        scorer=corr_scorer, method="corr_pruned" if pruned else "corr")


def coverage_driven(candidates, train: OutcomeTable, val: OutcomeTable, buckets: BucketSet,
                    config: BaselineConfig = BaselineConfig(), task=None) -> Router:
    return learn_router(candidates, train, val, buckets, config.router, task, prune=False,
                        scorer=coverage_scorer, method="coverage")


def hybrid(candidates, train: OutcomeTable, val: OutcomeTable, buckets: BucketSet,
           config: BaselineConfig = BaselineConfig(), task=None) -> Router:
    return learn_router(candidates, train, val, buckets, config.router, task, prune=True,
                        scorer=hybrid_scorer(config.alpha_hybrid), method="hybrid")


def majority_router(train: OutcomeTable, task: tuple[str, str], thetas: Sequence[str] | None = None) -> Router:
    """One unconditional rule: the regime whose ALL-target PNS event fires on most train pairs."""
    theta0, norm_id = task
    arms = train.bits[norm_id]
    pool = sorted(thetas if thetas is not None else (r for r in arms if r != theta0))
    if not pool:
        return Router([], theta0, norm_id, "majority")
    base_fail = ~train.conj(norm_id, theta0, ALL)
    wins = {t: int((train.conj(norm_id, t, ALL) & base_fail).sum()) for t in pool}
    top = max(wins.values())
    best = min(t for t in pool if wins[t] == top)  # lexicographic among ties
    return Router([Rule("TRUE", best, ALL, f"majority:{norm_id}|{theta0}>{best}")], theta0, norm_id,
                  "majority", [float(wins[best])], [])


def random_permutation(n: int, rng_seed: int = 42) -> np.ndarray:
    return np.random.default_rng(rng_seed).permutation(n)


def random_router(candidates: Sequence[Contract | Rule], task: tuple[str, str], rng_seed: int = 42,
                  k_max: int = 80) -> Router:
    """Seeded uniform permutation of the task's candidates, truncated to ``k_max`` rules."""
    theta0, norm_id = task
    rules, seen = [], set()
    for r in _rules(candidates):
        if r.rule_id not in seen:
            seen.add(r.rule_id)
            rules.append(r)
    rules.sort(key=lambda r: r.rule_id)  # input order must not leak into the draw
    perm = random_permutation(len(rules), rng_seed)
    return Router([rules[i] for i in perm[:k_max]], theta0, norm_id, "random")
