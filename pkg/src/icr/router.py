"""Minimal first-match rule routers: bucketed objective, greedy + prune learning, evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from icr.outcomes import OutcomeTable
from icr.pns import ALL, Contract, parse_targets, targets_label
from icr.simulator import Context

ROUTER_SCHEMA = "icr.router/1"
FALLBACK = "FALLBACK"


class MissingPNSError(KeyError):
    pass


class MissingArmError(KeyError):
    pass


class SplitOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class Rule:
    psi: str
    theta: str
    targets: object = ALL
    provenance: str = ""

    @property
    def rule_id(self) -> str:
        return self.provenance or f"{self.psi}=>{self.theta}|{targets_label(self.targets)}"


def rule_from_contract(c: Contract) -> Rule:
    return Rule(c.psi, c.theta, c.target_groups, c.contract_id)


@dataclass
class Router:
    rules: list[Rule]
    fallback: str
    norm_id: str = ""
    method: str = "pns_greedy"
    train_scores: list[float] = field(default_factory=list)
    val_scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def task(self) -> tuple[str, str]:
        return self.fallback, self.norm_id


@dataclass(frozen=True)
class RouterConfig:
    lam: float = 0.1
    tau_cov: float = 0.2
    tau_prune: float = 1e-2
    k_max: int = 80
    eps_imp: float = 1e-6
    group_weights: Mapping[str, float] | None = None
    n_min_bucket: int = 1
    selection_split: str = "train"  # split whose bucket PNS drives the greedy score
    # "insert": best (rule, position) by exact dJ; "marginal": append by sum_b w_b m_cb gain_cb;
    # "product": append by ncov * aggregated gain
    score_rule: str = "insert"

    def __post_init__(self):
        for k in ("lam", "tau_cov", "tau_prune", "eps_imp"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.k_max < 0:
            raise ValueError("k_max must be nonnegative")
        if self.score_rule not in ("insert", "marginal", "product"):
            raise ValueError(f"unknown score_rule {self.score_rule!r}")
        if self.selection_split not in ("train", "val"):
            raise ValueError(f"unknown selection_split {self.selection_split!r}")


# ---------------------------------------------------------------------------
# buckets


@dataclass
class BucketSet:
    keys: tuple[str, ...]
    labels: np.ndarray
    weights: np.ndarray
    scheme: str = "ic"
    cuts: tuple[float, ...] = ()

    def assign(self, contexts: Sequence[Context]) -> np.ndarray:
        """Bucket index for each context (``-1`` when it falls in no known bucket)."""
        if self.scheme == "ic":
            lut = {k: i for i, k in enumerate(self.keys)}
            return np.array([lut.get(c.ic_id, -1) for c in contexts], dtype=int)
        w = np.array([c.agg_wealth for c in contexts], dtype=float)
        return np.searchsorted(np.asarray(self.cuts), w, side="right").astype(int)


def bucketize(contexts: Sequence[Context], scheme: str = "ic", n_quantiles: int = 3) -> BucketSet:
    if not contexts:
        raise ValueError("cannot bucketize an empty context list")
    if scheme == "ic":
        keys = tuple(sorted({c.ic_id for c in contexts}))
        bs = BucketSet(keys, np.empty(0, dtype=int), np.empty(0), "ic")
    elif scheme == "wealth":
        w = np.array([c.agg_wealth for c in contexts])
        cuts = tuple(float(x) for x in np.quantile(w, np.linspace(0, 1, n_quantiles + 1)[1:-1]))
        bs = BucketSet(tuple(f"Q{i + 1}" for i in range(n_quantiles)), np.empty(0, dtype=int), np.empty(0),
                       "wealth", cuts)
    else:
        raise ValueError(f"unknown bucket scheme {scheme!r}")
    bs.labels = bs.assign(contexts)
    counts = np.bincount(bs.labels, minlength=len(bs.keys)).astype(float)
    bs.weights = counts / counts.sum()
    return bs


# ---------------------------------------------------------------------------
# coverage and objective


def _onehot(labels: np.ndarray, nb: int) -> np.ndarray:
    m = np.zeros((len(labels), nb))
    ok = labels >= 0
    m[np.nonzero(ok)[0], labels[ok]] = 1.0
    return m


def new_coverage(match: np.ndarray, in_bucket: np.ndarray, covered: np.ndarray) -> float:
    """Fraction of the bucket's episodes matched by the rule and not yet covered."""
    n = int(in_bucket.sum())
    if n == 0:
        raise ValueError("empty bucket")
    return float((match & in_bucket & ~covered).sum() / n)


def coverage_terms(match: np.ndarray, labels: np.ndarray, nb: int) -> np.ndarray:
    """``m[i, b]`` for rules in first-match order (rows of ``match``)."""
    oh = _onehot(labels, nb)
    sizes = oh.sum(axis=0)
    covered = np.zeros(match.shape[1], dtype=bool)
    m = np.zeros((match.shape[0], nb))
    for i, row in enumerate(match):
        fresh = row & ~covered
        m[i] = np.divide(fresh @ oh, sizes, out=np.zeros(nb), where=sizes > 0)
        covered |= row
    return m


def objective_J(rules: Sequence[Rule], match: Mapping[str, np.ndarray], labels: np.ndarray,
                weights: np.ndarray, gain: Mapping[str, np.ndarray], lam: float) -> float:
    """``sum_b w_b sum_i m_ib * gain_ib - lam * |S|`` under first-match order."""
    if not rules:
        return 0.0
    for r in rules:
        if r.rule_id not in gain:
            raise MissingPNSError(r.rule_id)
    nb = len(weights)
    M = np.array([match[r.rule_id] for r in rules], dtype=bool).reshape(len(rules), -1)
    G = np.array([gain[r.rule_id] for r in rules], dtype=float)
    m = coverage_terms(M, labels, nb)
    return float(np.sum(weights * np.sum(m * G, axis=0)) - lam * len(rules))


# ---------------------------------------------------------------------------
# scorers: (rules, table, task, labels, n_buckets, config) -> gain[R, B]


Scorer = Callable[[Sequence[Rule], OutcomeTable, tuple[str, str], np.ndarray, int, RouterConfig], np.ndarray]


def group_weight_vector(table: OutcomeTable, norm_id: str, targets, config: RouterConfig) -> np.ndarray:
    cols = table.target_cols(norm_id, targets)
    gs = table.groups[norm_id]
    if config.group_weights:
        w = np.array([config.group_weights.get(gs[c], 0.0) for c in cols], dtype=float)
    else:
        w = np.ones(len(cols))
    return w / w.sum() if w.sum() > 0 else w


def rule_event_values(rule: Rule, table: OutcomeTable, task: tuple[str, str], config: RouterConfig) -> np.ndarray:
    """Per-episode ``sum_g w_g 1{Y_g(theta)=1, Y_g(theta0)=0}`` over the rule's targets."""
    theta0, norm_id = task
    arms = table.bits[norm_id]
    if rule.theta not in arms or theta0 not in arms:
        raise MissingArmError(f"{norm_id}: no arm for {rule.theta!r} or {theta0!r}")
    cols = table.target_cols(norm_id, rule.targets)
    ev = (arms[rule.theta][:, cols] == 1) & (arms[theta0][:, cols] == 0)
    return ev @ group_weight_vector(table, norm_id, rule.targets, config)


def pns_scorer(rules, table, task, labels, nb, config) -> np.ndarray:
    """Bucket-restricted aggregated PNS on ``table`` (0 where support < ``n_min_bucket``)."""
    out = np.zeros((len(rules), nb))
    for i, r in enumerate(rules):
        match = table.flags[r.psi]
        vals = rule_event_values(r, table, task, config)
        for b in range(nb):
            sel = match & (labels == b)
            n = int(sel.sum())
            if n >= max(1, config.n_min_bucket):
                out[i, b] = float(vals[sel].mean())
    return out


# ---------------------------------------------------------------------------
# greedy + buckets + prune


@dataclass
class _View:
    match: np.ndarray  # (R, E)
    labels: np.ndarray
    oh: np.ndarray  # (E, B)
    sizes: np.ndarray  # (B,)

    @classmethod
    def build(cls, rules, table, labels, nb):
        match = np.array([table.flags[r.psi] for r in rules], dtype=bool).reshape(len(rules), len(table))
        oh = _onehot(labels, nb)
        return cls(match, labels, oh, oh.sum(axis=0))

    def fresh_cov(self, covered: np.ndarray) -> np.ndarray:
        fresh = self.match & ~covered
        return np.divide(fresh @ self.oh, self.sizes, out=np.zeros((len(self.match), len(self.sizes))),
                         where=self.sizes > 0)

    def J(self, order: Sequence[int], gain: np.ndarray, weights: np.ndarray, lam: float) -> float:
        if not order:
            return 0.0
        m = coverage_terms(self.match[list(order)], self.labels, len(weights))
        return float(np.sum(weights * np.sum(m * gain[list(order)], axis=0)) - lam * len(order))


def _insertion_gains(view: _View, order: Sequence[int], gain: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``dJ[c, k]`` (before the length penalty) of inserting candidate ``c`` at position ``k``.

    An episode switches to ``c`` iff ``c`` matches it and its current first
    match sits at or after ``k``; suffix sums over that position give every
    ``k`` at once. Position ``len(order)`` is a plain append.
    """
    R, E = view.match.shape
    L = len(order)
    nb = len(weights)
    lab = view.labels
    ok = lab >= 0
    omega = np.zeros(E)
    omega[ok] = np.divide(weights[lab[ok]], view.sizes[lab[ok]], out=np.zeros(int(ok.sum())),
                          where=view.sizes[lab[ok]] > 0)
    pos = np.full(E, L, dtype=int)
    cur = np.zeros(E)
    for k in reversed(range(L)):
        hit = view.match[order[k]]
        pos[hit] = k
    for e in np.nonzero(ok & (pos < L))[0]:
        cur[e] = gain[order[pos[e]], lab[e]]
    g_e = np.zeros((R, E))
    g_e[:, ok] = gain[:, lab[ok]] if nb else 0.0
    delta = view.match * omega * (g_e - cur)
    A = np.zeros((R, L + 1))
    for p in range(L + 1):
        sel = pos == p
        if sel.any():
            A[:, p] = delta[:, sel].sum(axis=1)
    return np.cumsum(A[:, ::-1], axis=1)[:, ::-1]


def greedy_select(ids: Sequence[str], train: _View, val: _View, weights: np.ndarray,
                  gain_sel: np.ndarray, gain_val: np.ndarray, config: RouterConfig,
                  prune: bool = True) -> tuple[list[int], list[float]]:
    """Greedy + bucket safeguard + backward prune over candidate indices.

    Returns the selected indices in router order and the greedy score at which
    each was added.
    """
    R = len(ids)
    rank = gain_sel @ weights  # aggregated PNS used for tie-breaks
    tie = np.argsort(np.argsort(ids, kind="stable"), kind="stable")  # smaller id wins
    chosen: list[int] = []
    scores: dict[int, float] = {}
    cov_val = np.zeros(val.match.shape[1], dtype=bool)

    def score_all() -> tuple[np.ndarray, np.ndarray]:
        """Best score per candidate and the position that attains it."""
        L = len(chosen)
        if config.score_rule == "insert":
            d = _insertion_gains(train, chosen, gain_sel, weights)
            # latest position among equals, so ties degrade to appending
            k = L - np.argmax(d[:, ::-1], axis=1)
            return d[np.arange(R), k] - config.lam, k
        covered = train.match[chosen].any(axis=0) if chosen else np.zeros(train.match.shape[1], dtype=bool)
        m = train.fresh_cov(covered)
        if config.score_rule == "product":
            sc = (m @ weights) * rank - config.lam
        else:
            sc = (m * gain_sel) @ weights - config.lam
        return sc, np.full(R, L, dtype=int)

    def best_of(cands: np.ndarray, sc: np.ndarray) -> int | None:
        if not len(cands):
            return None
        order = np.lexsort((tie[cands], -rank[cands], -sc[cands]))
        return int(cands[order[0]])

    def add(c: int, at: int, s: float) -> None:
        nonlocal cov_val
        chosen.insert(at, c)
        scores[c] = s
        cov_val = cov_val | val.match[c]

    while len(chosen) < config.k_max:
        avail = np.setdiff1d(np.arange(R), chosen)
        if not len(avail):
            break
        sc, at = score_all()
        c = best_of(avail, sc)
        if sc[c] <= config.eps_imp:
            break
        add(c, int(at[c]), float(sc[c]))

        # coverage safeguard on validation buckets
        has_val = val.sizes > 0
        if has_val.any() and len(chosen) < config.k_max:
            bcov = np.divide(cov_val @ val.oh, val.sizes, out=np.ones_like(val.sizes), where=has_val)
            bcov[~has_val] = np.inf
            worst = int(np.argmin(bcov))
            if bcov[worst] < config.tau_cov:
                avail = np.setdiff1d(np.arange(R), chosen)
                in_b = val.labels == worst
                raises = np.array([bool((val.match[a] & in_b & ~cov_val).any()) for a in avail], dtype=bool)
                sc, at = score_all()
                cands = avail[raises & (sc[avail] > 0)] if len(avail) else avail
                extra = best_of(cands, sc)
                if extra is not None:
                    add(extra, int(at[extra]), float(sc[extra]))

    if prune:
        current = list(chosen)
        for r in reversed(chosen):
            without = [x for x in current if x != r]
            if val.J(without, gain_val, weights, config.lam) >= val.J(current, gain_val, weights, config.lam) - config.tau_prune:
                current = without
        chosen = current
    return chosen, [scores[c] for c in chosen]


def learn_router(candidates: Sequence[Contract | Rule], train: OutcomeTable, val: OutcomeTable,
                 buckets: BucketSet, config: RouterConfig = RouterConfig(), task: tuple[str, str] | None = None,
                 prune: bool = True, scorer: Scorer = pns_scorer, method: str = "") -> Router:
    """Learn a first-match router for ``task = (theta0, norm)`` from ``candidates``."""
    rules = [rule_from_contract(c) if isinstance(c, Contract) else c for c in candidates]
    if task is None:
        if not candidates or not isinstance(candidates[0], Contract):
            raise ValueError("task must be given when candidates are bare rules")
        task = candidates[0].task
    theta0, norm_id = task
    method = method or ("pns_greedy_pruned" if prune else "pns_greedy")
    _check_disjoint(train, val, "train", "val")
    # duplicate rules can never both fire usefully; keep the first occurrence
    seen, uniq = set(), []
    for r in rules:
        if r.rule_id not in seen:
            seen.add(r.rule_id)
            uniq.append(r)
    rules = uniq
    if not rules:
        return Router([], theta0, norm_id, method)

    nb = len(buckets.keys)
    lab_tr, lab_val = buckets.assign(train.contexts), buckets.assign(val.contexts)
    vtr, vval = _View.build(rules, train, lab_tr, nb), _View.build(rules, val, lab_val, nb)
    gain_tr = scorer(rules, train, task, lab_tr, nb, config)
    gain_val = scorer(rules, val, task, lab_val, nb, config)
    gain_sel = gain_val if config.selection_split == "val" else gain_tr
    ids = [r.rule_id for r in rules]
    picked, sc = greedy_select(ids, vtr, vval, buckets.weights, gain_sel, gain_val, config, prune)
    val_sc = [float(gain_val[i] @ buckets.weights) for i in picked]
    return Router([rules[i] for i in picked], theta0, norm_id, method, sc, val_sc)


# ---------------------------------------------------------------------------
# routing and evaluation


def route(router: Router, context) -> str:
    """First matching rule's regime, else the fallback.

    ``context`` is either a mapping ``psi -> bool`` or a callable ``psi -> bool``.
    """
    holds = context if callable(context) else (lambda psi: bool(context.get(psi, False)))
    for r in router.rules:
        if holds(r.psi):
            return r.theta
    return router.fallback


@dataclass
class Tallies:
    split: str
    norm_id: str
    theta0: str
    routed: list[str]
    rule_index: np.ndarray  # -1 = fallback
    treat_ok: np.ndarray
    base_fail: np.ndarray

    @property
    def event(self) -> np.ndarray:
        return self.treat_ok & self.base_fail

    def __len__(self) -> int:
        return len(self.routed)


def _check_disjoint(a: OutcomeTable, b: OutcomeTable, na: str, nb: str) -> None:
    ka = {(c.ic_id, s) for c, s in zip(a.contexts, a.seeds)}
    kb = {(c.ic_id, s) for c, s in zip(b.contexts, b.seeds)}
    both = ka & kb
    if both:
        raise SplitOverlapError(f"{na}/{nb} share episodes: {sorted(both)[:5]}")


def evaluate_router(router: Router, table: OutcomeTable, split: str = "test") -> Tallies:
    theta0, norm_id = router.fallback, router.norm_id
    arms = table.bits[norm_id]
    n = len(table)
    idx = np.full(n, -1, dtype=int)
    for e in range(n):
        for i, r in enumerate(router.rules):
            if table.flags[r.psi][e]:
                idx[e] = i
                break
    routed, treat_ok, base_fail = [], np.zeros(n, dtype=bool), np.zeros(n, dtype=bool)
    for e in range(n):
        rule = router.rules[idx[e]] if idx[e] >= 0 else None
        theta = rule.theta if rule else theta0
        targets = rule.targets if rule else ALL
        if theta not in arms or theta0 not in arms:
            raise MissingArmError(f"{split}: no simulated arm for {theta!r} (baseline {theta0!r})")
        cols = table.target_cols(norm_id, targets)
        routed.append(theta)
        treat_ok[e] = bool(arms[theta][e, cols].all())
        base_fail[e] = not bool(arms[theta0][e, cols].all())
    return Tallies(split, norm_id, theta0, routed, idx, treat_ok, base_fail)


def evaluate_splits(router: Router, tables: Mapping[str, OutcomeTable]) -> dict[str, Tallies]:
    names = sorted(tables)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            _check_disjoint(tables[a], tables[b], a, b)
    return {s: evaluate_router(router, t, s) for s, t in tables.items()}


# ---------------------------------------------------------------------------
# files

ROUTER_COLUMNS = ("method", "norm", "baseline", "rank", "psi", "theta", "targets", "provenance",
                  "train_score", "val_score")


def save_routers(routers: Iterable[Router], path: str | Path) -> Path:
    """One row per rule, then one ``FALLBACK`` row closing each router."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={ROUTER_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(ROUTER_COLUMNS)
        for rt in routers:
            for k, r in enumerate(rt.rules):
                ts = rt.train_scores[k] if k < len(rt.train_scores) else float("nan")
                vs = rt.val_scores[k] if k < len(rt.val_scores) else float("nan")
                w.writerow([rt.method, rt.norm_id, rt.fallback, k + 1, r.psi, r.theta, targets_label(r.targets),
                            r.provenance, repr(float(ts)), repr(float(vs))])
            w.writerow([rt.method, rt.norm_id, rt.fallback, len(rt.rules) + 1, FALLBACK, rt.fallback, ALL, "",
                        "", ""])
    return path


def load_routers(path: str | Path) -> list[Router]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"#schema={ROUTER_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        rows = list(csv.DictReader(fh))
    out, cur = [], None
    for row in rows:
        if cur is None:
            cur = Router([], row["baseline"], row["norm"], row["method"])
        if row["psi"] == FALLBACK:
            out.append(cur)
            cur = None
            continue
        cur.rules.append(Rule(row["psi"], row["theta"], parse_targets(row["targets"]), row["provenance"]))
        cur.train_scores.append(float(row["train_score"]))
        cur.val_scores.append(float(row["val_score"]))
    if cur is not None:
        raise ValueError(f"{path}: router without FALLBACK row")
    return out
