"""Three-stage pipeline driver, ablation harness, manifest and plot-data bundle."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from icr import __version__
from icr.attribution import (FACTORS, AttributionReport, InsufficientEpisodesError, Route, episode_factor_values,
                             factor_keys, key_factors, route_from_id, save_reports)
from icr.baselines import (METHODS, corr_greedy, coverage_driven, hybrid, majority_router, random_router)
from icr.config import ExperimentConfig, config_from_dict, save_config
from icr.metrics import MetricRow, coverage, format_table, load_metric_rows, pns_target, save_metric_rows
from icr.norms import NORM_STAT, default_catalog
from icr.outcomes import OutcomeTable, table_from_records
from icr.pns import (Contract, enumerate_contracts, filter_contracts, load_contracts, predicate_catalog,
                     predicate_from_id, save_contracts)
from icr.router import Router, Tallies, bucketize, evaluate_router, learn_router, load_routers, save_routers
from icr.simulator import EpisodeRecord, run_episode

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "icr.manifest/1"
EpisodeKey = tuple[str, int]


# ---------------------------------------------------------------------------
# manifest


@dataclass
class StageEntry:
    key: str
    outputs: list[str]
    seconds: float
    extra: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    config_hash: str = ""
    version: str = __version__
    episodes: dict[str, str] = field(default_factory=dict)  # "IC1/1101/GMV" -> path stem
    stages: dict[str, StageEntry] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "config_hash": self.config_hash,
            "version": self.version,
            "episodes": dict(sorted(self.episodes.items())),
            "stages": {k: {"key": v.key, "outputs": v.outputs, "seconds": v.seconds, "extra": v.extra}
                       for k, v in sorted(self.stages.items())},
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        if d.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: unexpected manifest schema {d.get('schema')!r}")
        stages = {k: StageEntry(v["key"], list(v["outputs"]), float(v["seconds"]), dict(v.get("extra", {})))
                  for k, v in d.get("stages", {}).items()}
        return cls(d.get("config_hash", ""), d.get("version", ""), dict(d.get("episodes", {})), stages)

    def missing_files(self, root: Path) -> list[str]:
        out = []
        for stem in self.episodes.values():
            for suf in (".csv", ".json"):
                if not (root / stem).with_suffix(suf).exists():
                    out.append(stem + suf)
        for st in self.stages.values():
            out += [p for p in st.outputs if not (root / p).exists()]
        return out


def _stage_key(config_hash: str, name: str, **args) -> str:
    text = json.dumps({"config": config_hash, "stage": name, **args}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# simulation fan-out


def _simulate_one(job) -> EpisodeRecord:
    ic, regime, seed, params = job
    return run_episode(ic, regime, seed, params=params)


def simulate_all(config: ExperimentConfig, keys: Sequence[EpisodeKey], jobs: int = 1
                 ) -> dict[EpisodeKey, dict[str, EpisodeRecord]]:
    """Every regime on every ``(ic, seed)``; results are independent of ``jobs``."""
    regimes = sorted(config.regimes)
    work = [(config.ics[ic], config.regimes[r], seed, config.sim) for ic, seed in keys for r in regimes]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            recs = list(ex.map(_simulate_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        recs = [_simulate_one(w) for w in work]
    out: dict[EpisodeKey, dict[str, EpisodeRecord]] = {}
    for rec in recs:
        out.setdefault((rec.ic_id, rec.seed), {})[rec.regime_id] = rec
    return out


def parse_seed_filter(expr: str | None) -> dict[str, set[int] | None] | None:
    """``"IC1,IC2:1201+1203"`` keeps all of IC1 and two IC2 seeds; ``None`` keeps everything."""
    if not expr:
        return None
    out: dict[str, set[int] | None] = {}
    for item in expr.split(","):
        item = item.strip()
        if not item:
            continue
        ic, _, seeds = item.partition(":")
        out[ic] = {int(s) for s in seeds.split("+")} if seeds else None
    return out


# ---------------------------------------------------------------------------
# pipeline


class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1,
                 seed_filter: str | None = None):
        self.config = config
        self.out = Path(out_dir or config.out_dir)
        self.jobs = max(1, int(jobs))
        self.filter = parse_seed_filter(seed_filter)
        self.chash = config.hash()
        mpath = self.out / "manifest.json"
        self.manifest = RunManifest.load(mpath) if mpath.exists() else RunManifest()
        if self.manifest.config_hash and self.manifest.config_hash != self.chash:
            log.info("config changed; previous stage outputs are stale")
            self.manifest = RunManifest()
        self.manifest.config_hash = self.chash
        self._records: dict[EpisodeKey, dict[str, EpisodeRecord]] | None = None
        self._tables: dict[str, OutcomeTable] | None = None

    # -- bookkeeping -------------------------------------------------------
    def _fresh(self, name: str, key: str) -> StageEntry | None:
        st = self.manifest.stages.get(name)
        if st and st.key == key and all((self.out / p).exists() for p in st.outputs):
            return st
        return None

    def _record(self, name: str, key: str, outputs: Iterable[Path], t0: float, **extra) -> StageEntry:
        st = StageEntry(key, [str(Path(p).relative_to(self.out)) for p in outputs], round(time.time() - t0, 3),
                        extra)
        self.manifest.stages[name] = st
        self.manifest.save(self.out / "manifest.json")
        return st

    def _keys(self, split: str | None = None) -> list[EpisodeKey]:
        keys = set()
        for ic, sp in self.config.splits().items():
            if self.filter is not None and ic not in self.filter:
                continue
            names = ("train", "test") if split is None else (split,)
            for n in names:
                for s in sp[n]:
                    allowed = self.filter.get(ic) if self.filter is not None else None
                    if allowed is None or s in allowed:
                        keys.add((ic, s))
        return sorted(keys)

    # -- episodes ----------------------------------------------------------
    def simulate(self) -> dict[EpisodeKey, dict[str, EpisodeRecord]]:
        if self._records is not None:
            return self._records
        keys = self._keys()
        key = _stage_key(self.chash, "simulate", keys=[list(k) for k in keys])
        t0 = time.time()
        if self._fresh("simulate", key) and not self.manifest.missing_files(self.out):
            recs: dict[EpisodeKey, dict[str, EpisodeRecord]] = {}
            for name, stem in sorted(self.manifest.episodes.items()):
                ic, seed, rid = name.split("/")
                if (ic, int(seed)) in keys:
                    recs.setdefault((ic, int(seed)), {})[rid] = EpisodeRecord.load(self.out / stem)
            self._records = recs
            return recs
        save_config(self.config, self.out / "config.yaml")
        recs = simulate_all(self.config, keys, self.jobs)
        outputs = [self.out / "config.yaml"]
        self.manifest.episodes = {}
        for (ic, seed), arms in sorted(recs.items()):
            for rid, rec in sorted(arms.items()):
                stem = Path("episodes") / ic / str(seed) / rid
                rec.save(self.out / stem)
                self.manifest.episodes[f"{ic}/{seed}/{rid}"] = str(stem)
        self._record("simulate", key, outputs, t0, n_episodes=sum(len(a) for a in recs.values()))
        self._records = recs
        return recs

    def tables(self) -> dict[str, OutcomeTable]:
        if self._tables is not None:
            return self._tables
        recs = self.simulate()
        splits = {name: set(self._keys(name)) for name in ("train", "fit", "val", "test")}
        train_ctx = [next(iter(recs[k].values())).x0 for k in sorted(splits["train"])]
        preds = predicate_catalog(train_ctx)
        q = self.config.sim.attain_q
        self._tables = {name: table_from_records({k: recs[k] for k in sorted(ks)}, self.config.catalog, preds, q)
                        for name, ks in splits.items() if ks}
        self._wealth_cut = preds["Wlo"].wealth_cut
        return self._tables

    def tasks(self) -> list[tuple[str, str]]:
        return [(t0, n) for t0 in sorted(self.config.regimes) for n in sorted(self.config.catalog)]

    # -- stage I -----------------------------------------------------------
    def stage1(self) -> Path:
        key = _stage_key(self.chash, "stage1", keys=[list(k) for k in self._keys()])
        path = self.out / "contracts.csv"
        if self._fresh("stage1", key):
            return path
        t0 = time.time()
        train = self.tables()["train"]
        regimes = sorted(self.config.regimes)
        pairs = {(th, th0): train.pairs(th, th0) for th0 in regimes for th in regimes if th != th0}
        pc = self.config.pns
        pool = enumerate_contracts(pairs, sorted(train.flags), train.groups, pc.level, 1, pc.single_groups)
        kept = filter_contracts(pool, pc.n_min, pc.tau_pns)
        # accountable clauses first (in filter order), then the rest by id
        rest = sorted((c for c in pool if not c.accountable), key=lambda c: c.contract_id)
        save_contracts(kept + rest, path)
        self._record("stage1", key, [path], t0, n_candidates=len(pool), n_accountable=len(kept))
        return path

    def contracts(self) -> list[Contract]:
        return load_contracts(self.stage1())

    # -- stage II ----------------------------------------------------------
    def learn(self, method: str, pool: Sequence[Contract]) -> list[Router]:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        tabs = self.tables()
        fit, val, train = tabs["fit"], tabs.get("val"), tabs["train"]
        if val is None:
            raise ValueError("router learning needs a non-empty validation split")
        buckets = bucketize(fit.contexts, self.config.bucket_scheme)
        cfg = self.config.baselines
        routers = []
        for task in self.tasks():
            theta0, norm_id = task
            mine = [c for c in pool if c.task == task]
            accountable = [c for c in mine if c.accountable]
            if method in ("pns_greedy", "pns_greedy_pruned"):
                r = learn_router(accountable, fit, val, buckets, self.config.router, task,
                                 prune=method.endswith("pruned"), method=method)
            elif method in ("corr", "corr_pruned"):
                r = corr_greedy(mine, fit, val, buckets, cfg, task, pruned=method.endswith("pruned"))
            elif method == "coverage":
                r = coverage_driven(mine, fit, val, buckets, cfg, task)
            elif method == "hybrid":
                r = hybrid(mine, fit, val, buckets, cfg, task)
            elif method == "majority":
                r = majority_router(train, task, [t for t in sorted(self.config.regimes) if t != theta0])
            else:
                r = random_router(mine, task, cfg.rng_seed, self.config.router.k_max)
            routers.append(r)
        return routers

    def evaluate(self, method: str, routers: Sequence[Router]) -> tuple[MetricRow, list[dict]]:
        tabs = self.tables()
        per_split: dict[str, list[Tallies]] = {"train": [], "test": []}
        series = []
        for r in routers:
            for split in ("train", "test"):
                if split not in tabs:
                    continue
                t = evaluate_router(r, tabs[split], split)
                per_split[split].append(t)
                series.append({"method": method, "norm": r.norm_id, "baseline": r.fallback, "split": split,
                               "n": len(t), "pns": pns_target(t), "cov": coverage(t), "rules": len(r)})
        row = MetricRow.from_tallies(method, per_split["train"], per_split["test"], sum(len(r) for r in routers),
                                     self.config.metrics)
        return row, series

    def stage2(self, method: str = "pns_greedy_pruned") -> tuple[Path, Path]:
        key = _stage_key(self.chash, f"stage2:{method}", keys=[list(k) for k in self._keys()])
        rpath, mpath = self.out / "routers" / f"{method}.csv", self.out / "metrics" / f"{method}.csv"
        if self._fresh(f"stage2:{method}", key):
            return rpath, mpath
        t0 = time.time()
        routers = self.learn(method, self.contracts())
        row, series = self.evaluate(method, routers)
        save_routers(routers, rpath)
        save_metric_rows([row], mpath)
        spath = self.out / "metrics" / f"{method}_series.csv"
        _write_rows(spath, SERIES_COLUMNS, series)
        self._record(f"stage2:{method}", key, [rpath, mpath, spath], t0)
        return rpath, mpath

    # -- ablation ----------------------------------------------------------
    def ablate(self, methods: Sequence[str] = METHODS) -> Path:
        key = _stage_key(self.chash, "ablate", methods=list(methods), keys=[list(k) for k in self._keys()])
        path = self.out / "table2.csv"
        if self._fresh("ablate", key):
            return path
        t0 = time.time()
        rows, series = [], []
        for m in methods:
            rp, mp = self.stage2(m)
            rows += load_metric_rows(mp)
            with open(self.out / "metrics" / f"{m}_series.csv", newline="") as fh:
                series += list(csv.DictReader(fh))
        save_metric_rows(rows, path)
        txt = self.out / "table2.txt"
        txt.write_text(format_table(rows))
        spath = self.out / "ablation_series.csv"
        _write_rows(spath, SERIES_COLUMNS, series)
        self._record("ablate", key, [path, txt, spath], t0)
        return path

    # -- stage III ---------------------------------------------------------
    def routes_from_router(self, method: str = "pns_greedy_pruned") -> list[Route]:
        rpath, _ = self.stage2(method)
        out, seen = [], set()
        for r in load_routers(rpath):
            for rule in r.rules:
                route = Route(rule.theta, r.fallback, r.norm_id, rule.targets, rule.psi)
                if route.route_id not in seen:
                    seen.add(route.route_id)
                    out.append(route)
        return out

    def stage3(self, route_id: str | None = None, method: str = "pns_greedy_pruned") -> Path:
        key = _stage_key(self.chash, "stage3", route=route_id or "", method=method,
                         keys=[list(k) for k in self._keys()])
        path = self.out / "attribution.csv"
        if self._fresh("stage3", key):
            return path
        t0 = time.time()
        routes = [route_from_id(route_id)] if route_id else self.routes_from_router(method)
        recs = self.simulate()
        self.tables()
        reports: list[AttributionReport] = []
        skipped = {}
        for route in routes:
            pred = predicate_from_id(route.psi, self._wealth_cut)
            pairs = [(arms[route.theta], arms[route.theta0]) for k, arms in sorted(recs.items())
                     if pred(next(iter(arms.values())).x0)]
            try:
                reports.append(key_factors(route, pairs, self.config.catalog, self.config.attribution))
            except InsufficientEpisodesError as e:
                skipped[route.route_id] = str(e)
                log.warning("stage3: %s", e)
        save_reports(reports, path)
        self._record("stage3", key, [path], t0, skipped=skipped)
        return path

    # -- report ------------------------------------------------------------
    def report(self) -> Path:
        self.simulate()
        return report(self.manifest, self.out, self.out / "report", self.config)


# ---------------------------------------------------------------------------
# plot-data bundle

SERIES_COLUMNS = ("method", "norm", "baseline", "split", "n", "pns", "cov", "rules")
FIG3_COLUMNS = ("norm", "stat", "regime", "group", "ic", "seed", "step", "value", "band", "inside")
FIG4_COLUMNS = ("regime", "factor", "group", "ic", "seed", "value")
DELTA_COLUMNS = ("factor", "group", "mean_FAI", "mean_UW", "delta")


def _write_rows(path: Path, columns: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return path


def report(manifest: RunManifest, root: str | Path, out_dir: str | Path,
           config: ExperimentConfig | None = None) -> Path:
    """Final-window trajectories with bands, per-episode factor values, and FAI-vs-UW factor deltas."""
    root, out_dir = Path(root), Path(out_dir)
    catalog = config.catalog if config is not None else default_catalog()
    fig3, fig4 = [], []
    by_regime: dict[str, dict[tuple[str, str], list[float]]] = {}
    for name, stem in sorted(manifest.episodes.items()):
        rec = EpisodeRecord.load(root / stem)
        start = rec.horizon - rec.window
        for nid, band in sorted(catalog.items()):
            stat = band.stat or NORM_STAT[nid]
            arr = rec.phi1 if stat == "phi1" else rec.phi2
            for g in band.groups:
                iv = band.per_group[g]
                col = arr[start:, ["low", "mid", "high"].index(g)]
                for t, v in zip(range(start, rec.horizon), col):
                    fig3.append({"norm": nid, "stat": stat, "regime": rec.regime_id, "group": g, "ic": rec.ic_id,
                                 "seed": rec.seed, "step": t, "value": float(v), "band": str(iv),
                                 "inside": int(iv.contains(float(v)))})
        vals = episode_factor_values(rec)
        for (f, g), v in sorted(vals.items(), key=lambda kv: (FACTORS.index(kv[0][0]), kv[0][1])):
            fig4.append({"regime": rec.regime_id, "factor": f, "group": g, "ic": rec.ic_id, "seed": rec.seed,
                         "value": v})
            by_regime.setdefault(rec.regime_id, {}).setdefault((f, g), []).append(v)
    deltas = []
    if "FAI" in by_regime and "UW" in by_regime:
        for f, g in factor_keys():
            a, b = by_regime["FAI"].get((f, g)), by_regime["UW"].get((f, g))
            if a and b:
                deltas.append({"factor": f, "group": g, "mean_FAI": float(np.mean(a)), "mean_UW": float(np.mean(b)),
                               "delta": float(np.mean(a) - np.mean(b))})
    _write_rows(out_dir / "fig3_trajectories.csv", FIG3_COLUMNS, fig3)
    _write_rows(out_dir / "fig4_factors.csv", FIG4_COLUMNS, fig4)
    _write_rows(out_dir / "fig4_fai_uw_delta.csv", DELTA_COLUMNS, deltas)
    return out_dir


# ---------------------------------------------------------------------------
# functional entry points


def run_stage1(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> Path:
    return Pipeline(config, out_dir, jobs).stage1()


def run_stage2(config: ExperimentConfig, method: str = "pns_greedy_pruned", out_dir=None, jobs: int = 1
               ) -> tuple[Path, Path]:
    return Pipeline(config, out_dir, jobs).stage2(method)


def run_stage3(config: ExperimentConfig, route_id: str | None = None, out_dir=None, jobs: int = 1) -> Path:
    return Pipeline(config, out_dir, jobs).stage3(route_id)


def ablate(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> Path:
    return Pipeline(config, out_dir, jobs).ablate()
