"""Key-factor attribution: matched twin-world lever/response distributions compared by normalized W1."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from icr.norms import GROUPS, NormBand
from icr.pns import ALL, parse_targets, targets_label
from icr.simulator import EpisodeRecord, compute_outcomes

REPORT_SCHEMA = "icr.attribution/1"
FACTORS = ("sigma", "kappa", "f", "kappa_f", "r_t", "p", "h")
GROUPED = ("sigma", "p", "h")
GLOBAL = "ALL"


class InsufficientEpisodesError(ValueError):
    pass


class UnmatchedSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class AttributionConfig:
    theta_dist: float = 0.3
    alpha: float = 0.05
    n_perm: int = 10_000
    scale_rule: str = "pooled-std"  # or "unit"
    population: str = "complier"  # or "all"
    n_min: int = 3
    seed: int = 42
    q: float = 0.9

    def __post_init__(self):
        if self.theta_dist < 0:
            raise ValueError("theta_dist must be nonnegative")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_perm < 1:
            raise ValueError("n_perm must be positive")
        if self.scale_rule not in ("pooled-std", "unit"):
            raise ValueError(f"unknown scale_rule {self.scale_rule!r}")
        if self.population not in ("complier", "all"):
            raise ValueError(f"unknown population {self.population!r}")


@dataclass
class FactorSamples:
    factor_id: str
    samples_treat: np.ndarray
    samples_base: np.ndarray
    group: str = GLOBAL
    matched: bool = True

    def __post_init__(self):
        self.samples_treat = np.asarray(self.samples_treat, dtype=float)
        self.samples_base = np.asarray(self.samples_base, dtype=float)
        if not (np.isfinite(self.samples_treat).all() and np.isfinite(self.samples_base).all()):
            raise ValueError(f"{self.factor_id}/{self.group}: non-finite samples")


# ---------------------------------------------------------------------------
# distances and tests


def wasserstein1(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1 needs two nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b))


def pooled_std(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.std(np.concatenate([a, b])))


def divergence(fs: FactorSamples, config: AttributionConfig = AttributionConfig()) -> float:
    """``W1 / s`` with ``s`` the pooled std (1 when degenerate or under the unit rule)."""
    if not fs.matched:
        raise UnmatchedSamplesError(f"{fs.factor_id}/{fs.group}: samples are not matched across arms")
    w = wasserstein1(fs.samples_treat, fs.samples_base)
    s = pooled_std(fs.samples_treat, fs.samples_base) if config.scale_rule == "pooled-std" else 1.0
    return w / (s if s >= 1e-12 else 1.0)


def _w1_batch(pooled: np.ndarray, in_a: np.ndarray, na: int, nb: int) -> np.ndarray:
    """W1 for many relabellings at once via the CDF-difference integral over the sorted pool."""
    order = np.argsort(pooled, kind="stable")
    u = pooled[order]
    lab = in_a[:, order]
    ca = np.cumsum(lab, axis=1)
    j = np.arange(1, len(u) + 1)
    diff = np.abs(ca / na - (j - ca) / nb)
    return (diff[:, :-1] * np.diff(u)).sum(axis=1)


def permutation_test(a: Sequence[float], b: Sequence[float], n_perm: int = 10_000, seed: int = 0) -> float:
    """Add-one permutation p-value for the W1 statistic."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("permutation_test needs two nonempty samples")
    pooled = np.concatenate([a, b])
    na, nb, N = a.size, b.size, a.size + b.size
    base = np.zeros((1, N), dtype=bool)
    base[0, :na] = True
    obs = _w1_batch(pooled, base, na, nb)[0]
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n_perm, 2048):
        m = min(2048, n_perm - start)
        keys = rng.random((m, N))
        in_a = np.argsort(keys, axis=1) < na  # a uniform relabelling per row
        perm = _w1_batch(pooled, in_a, na, nb)
        hits += int((perm >= obs - 1e-12 * max(1.0, abs(obs))).sum())
    return (1 + hits) / (1 + n_perm)


def holm_bonferroni(pvals: Sequence[float], alpha: float = 0.05) -> list[bool]:
    p = np.asarray(pvals, dtype=float)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    reject = [False] * m
    for rank, i in enumerate(np.argsort(p, kind="stable")):
        if p[i] <= alpha / (m - rank):
            reject[i] = True
        else:
            break
    return reject


def factor_seed(base: int, factor_id: str, group: str) -> int:
    """Permutation stream per (factor, group) so test order never matters."""
    return (int(base) * 1_000_003 + zlib.crc32(f"{factor_id}/{group}".encode())) & 0xFFFF_FFFF


# ---------------------------------------------------------------------------
# routes and reports


@dataclass(frozen=True)
class Route:
    theta: str
    theta0: str
    norm_id: str
    targets: object = ALL
    psi: str = "TRUE"

    @property
    def route_id(self) -> str:
        return f"{self.norm_id}|{self.theta0}>{self.theta}|{targets_label(self.targets)}|{self.psi}"


def episode_factor_values(rec: EpisodeRecord) -> dict[tuple[str, str], float]:
    """Final-window mean of every lever and response, keyed by ``(factor, group)``."""
    win = slice(rec.horizon - rec.window, rec.horizon)
    out = {}
    for k, g in enumerate(GROUPS):
        out[("sigma", g)] = float(rec.lever(f"sigma_{g}")[win].mean())
        out[("p", g)] = float(rec.p_mean[win, k].mean())
        out[("h", g)] = float(rec.h_mean[win, k].mean())
    for name in ("kappa", "f", "kappa_f", "r_t"):
        out[(name, GLOBAL)] = float(rec.lever(name)[win].mean())
    return out


def factor_keys() -> list[tuple[str, str]]:
    keys = []
    for f in FACTORS:
        keys += [(f, g) for g in GROUPS] if f in GROUPED else [(f, GLOBAL)]
    return keys


def factor_samples(pairs: Sequence[tuple[EpisodeRecord, EpisodeRecord]]) -> list[FactorSamples]:
    """Matched samples: one value per pair and arm, in pair order."""
    for t, b in pairs:
        if (t.ic_id, t.seed) != (b.ic_id, b.seed):
            raise UnmatchedSamplesError(f"pair mixes episodes {(t.ic_id, t.seed)} and {(b.ic_id, b.seed)}")
    tv = [episode_factor_values(t) for t, _ in pairs]
    bv = [episode_factor_values(b) for _, b in pairs]
    return [FactorSamples(f, [v[(f, g)] for v in tv], [v[(f, g)] for v in bv], g) for f, g in factor_keys()]


def complier_mask(pairs: Sequence[tuple[EpisodeRecord, EpisodeRecord]], route: Route,
                  catalog: Mapping[str, NormBand], q: float = 0.9) -> np.ndarray:
    band = catalog[route.norm_id]
    gs = band.groups if route.targets == ALL else tuple(route.targets)
    out = []
    for t, b in pairs:
        ot = compute_outcomes(t, {route.norm_id: band}, q)[route.norm_id].bits
        ob = compute_outcomes(b, {route.norm_id: band}, q)[route.norm_id].bits
        out.append(all(ot[g] for g in gs) and not all(ob[g] for g in gs))
    return np.array(out, dtype=bool)


@dataclass
class FactorResult:
    factor_id: str
    group: str
    d: float
    p: float
    corrected: bool
    key: bool
    treat_mean: float
    base_mean: float

    @property
    def delta(self) -> float:
        return self.treat_mean - self.base_mean


@dataclass
class AttributionReport:
    route_id: str
    population: str
    n_episodes: int
    results: list[FactorResult] = field(default_factory=list)

    @property
    def key_factors(self) -> list[FactorResult]:
        return sorted((r for r in self.results if r.key), key=lambda r: (-r.d, r.factor_id, r.group))

    def result(self, factor_id: str, group: str = GLOBAL) -> FactorResult:
        for r in self.results:
            if (r.factor_id, r.group) == (factor_id, group):
                return r
        raise KeyError((factor_id, group))


def attribute(samples: Sequence[FactorSamples], route_id: str, config: AttributionConfig = AttributionConfig(),
              population: str = "") -> AttributionReport:
    """Divergence, permutation p and Holm correction across every factor x group test."""
    n = min((len(s.samples_treat) for s in samples), default=0)
    if n < config.n_min:
        raise InsufficientEpisodesError(f"{route_id}: {n} matched episodes < n_min={config.n_min}")
    ds = [divergence(s, config) for s in samples]
    ps = [permutation_test(s.samples_treat, s.samples_base, config.n_perm,
                           factor_seed(config.seed, s.factor_id, s.group)) for s in samples]
    rej = holm_bonferroni(ps, config.alpha)
    res = [FactorResult(s.factor_id, s.group, d, p, r, bool(r and d >= config.theta_dist),
                        float(s.samples_treat.mean()), float(s.samples_base.mean()))
           for s, d, p, r in zip(samples, ds, ps, rej)]
    return AttributionReport(route_id, population or config.population, n, res)


def key_factors(route: Route, pairs: Sequence[tuple[EpisodeRecord, EpisodeRecord]],
                catalog: Mapping[str, NormBand], config: AttributionConfig = AttributionConfig()) -> AttributionReport:
    """Attribution for ``route`` over ψ-matched twin pairs ``(treated, baseline)``.

    ``pairs`` must already be restricted to the route's context predicate.
    Under the complier population only pairs exhibiting the PNS event count.
    """
    pairs = list(pairs)
    if config.population == "complier" and pairs:
        keep = complier_mask(pairs, route, catalog, config.q)
        pairs = [p for p, k in zip(pairs, keep) if k]
    if len(pairs) < config.n_min:
        raise InsufficientEpisodesError(f"{route.route_id}: {len(pairs)} episodes < n_min={config.n_min}")
    return attribute(factor_samples(pairs), route.route_id, config)


# ---------------------------------------------------------------------------
# files

REPORT_COLUMNS = ("route", "population", "n", "factor", "group", "D", "p", "corrected", "key",
                  "treat_mean", "base_mean", "delta")


def save_reports(reports: Sequence[AttributionReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={REPORT_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for r in rep.results:
                w.writerow([rep.route_id, rep.population, rep.n_episodes, r.factor_id, r.group, repr(r.d),
                            repr(r.p), int(r.corrected), int(r.key), repr(r.treat_mean), repr(r.base_mean),
                            repr(r.delta)])
    return path


def load_reports(path: str | Path) -> list[AttributionReport]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"#schema={REPORT_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        rows = list(csv.DictReader(fh))
    out: dict[str, AttributionReport] = {}
    for row in rows:
        rep = out.setdefault(row["route"], AttributionReport(row["route"], row["population"], int(row["n"])))
        rep.results.append(FactorResult(row["factor"], row["group"], float(row["D"]), float(row["p"]),
                                        bool(int(row["corrected"])), bool(int(row["key"])),
                                        float(row["treat_mean"]), float(row["base_mean"])))
    return list(out.values())


def route_from_id(route_id: str) -> Route:
    parts = route_id.split("|")
    if len(parts) != 4 or ">" not in parts[1]:
        raise ValueError(f"route id {route_id!r} must look like 'NORM|BASE>CUR|TARGETS|PSI'")
    norm_id, arms, targets, psi = parts
    theta0, theta = arms.split(">", 1)
    return Route(theta, theta0, norm_id, parse_targets(targets), psi)
