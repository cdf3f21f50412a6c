"""Experiment configuration: presets, seed splits, loading and hashing."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from icr.attribution import AttributionConfig
from icr.baselines import BaselineConfig
from icr.metrics import MetricsConfig
from icr.norms import NORM_IDS, NormBand, catalog_from_dict, catalog_to_dict, default_catalog
from icr.router import RouterConfig
from icr.simulator import DEFAULT_REGIMES, IC_PRESETS, REGIME_IDS, ICConfig, Regime, SimParams

log = logging.getLogger(__name__)

CONFIG_ENV = "ICR_CONFIG"
CONFIG_SCHEMA = "icr.config/1"


class ConfigError(ValueError):
    """Malformed config text or values."""


class UnresolvedIdError(ConfigError):
    pass


class SeedOverlapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PNSConfig:
    tau_pns: float = 0.8
    n_min: int = 3
    level: float = 0.95
    single_groups: bool = True


@dataclass(frozen=True)
class SeedSplit:
    train: tuple[int, ...]
    test: tuple[int, ...]
    val: tuple[int, ...] = ()


def table8_seeds(ic_ids=("IC1", "IC2", "IC3", "IC4", "IC5")) -> dict[str, SeedSplit]:
    """Odd seeds train, even seeds test: IC<k> uses 1k01..1k08."""
    out = {}
    for ic in ic_ids:
        base = 1000 + 100 * int(ic[2:])
        out[ic] = SeedSplit(tuple(base + i for i in (1, 3, 5, 7)), tuple(base + i for i in (2, 4, 6, 8)))
    return out


def twin_split_seeds(ic_ids=("IC1", "IC2", "IC3", "IC4", "IC5")) -> dict[str, SeedSplit]:
    """Alternate convention: train 0..7, val 8..9, test 10..12 for every IC."""
    return {ic: SeedSplit(tuple(range(8)), tuple(range(10, 13)), (8, 9)) for ic in ic_ids}


SEED_PRESETS = {"table8": table8_seeds, "twin": twin_split_seeds}


@dataclass
class ExperimentConfig:
    ics: dict[str, ICConfig] = field(default_factory=lambda: dict(IC_PRESETS))
    regimes: dict[str, Regime] = field(default_factory=lambda: dict(DEFAULT_REGIMES))
    catalog: dict[str, NormBand] = field(default_factory=default_catalog)
    seeds: dict[str, SeedSplit] = field(default_factory=table8_seeds)
    sim: SimParams = field(default_factory=SimParams)
    pns: PNSConfig = field(default_factory=PNSConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    bucket_scheme: str = "ic"
    val_rule: str = "last-train"  # or "explicit": use SeedSplit.val as given
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    def validate(self) -> None:
        for ic in self.seeds:
            if ic not in self.ics:
                raise UnresolvedIdError(f"seed table names unknown IC {ic!r}")
        for rid in self.regimes:
            if rid not in REGIME_IDS:
                raise UnresolvedIdError(f"unknown regime {rid!r}; expected one of {REGIME_IDS}")
        for nid in self.catalog:
            if nid not in NORM_IDS:
                raise UnresolvedIdError(f"unknown norm {nid!r}; expected one of {NORM_IDS}")
        if self.bucket_scheme not in ("ic", "wealth"):
            raise ConfigError(f"unknown bucket scheme {self.bucket_scheme!r}")
        if self.val_rule not in ("last-train", "explicit"):
            raise ConfigError(f"unknown val_rule {self.val_rule!r}")
        clean = {}
        for ic, sp in self.seeds.items():
            train = tuple(dict.fromkeys(int(s) for s in sp.train))
            if not train:
                raise ConfigError(f"{ic}: empty train seed list")
            val = tuple(int(s) for s in sp.val if s not in train)
            dropped = [s for s in sp.test if s in train or s in val]
            if dropped:
                msg = f"{ic}: dropping test seeds also used for training {sorted(dropped)}"
                warnings.warn(msg, SeedOverlapWarning, stacklevel=3)
                log.warning(msg)
            test = tuple(int(s) for s in sp.test if s not in dropped)
            clean[ic] = SeedSplit(train, test, val)
        self.seeds = clean

    # ------------------------------------------------------------------
    def splits(self) -> dict[str, dict[str, tuple[int, ...]]]:
        """Effective ``{ic: {"train", "fit", "val", "test"}}``.

        ``train`` is the full training pool (Stage I and the train metrics);
        ``fit`` and ``val`` partition it for router learning.
        """
        out = {}
        for ic in sorted(self.seeds):
            sp = self.seeds[ic]
            if self.val_rule == "last-train" and not sp.val:
                val = sp.train[-1:] if len(sp.train) > 1 else ()
                fit = sp.train[:-1] if val else sp.train
                train = sp.train
            else:
                val, fit = sp.val, sp.train
                train = sp.train + sp.val
            out[ic] = {"train": tuple(train), "fit": tuple(fit), "val": tuple(val), "test": sp.test}
        return out

    def all_seeds(self) -> list[tuple[str, int]]:
        keys = set()
        for ic, sp in self.splits().items():
            for name in ("train", "test"):
                keys |= {(ic, s) for s in sp[name]}
        return sorted(keys)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": CONFIG_SCHEMA,
            "ics": {k: _plain(asdict(v)) for k, v in sorted(self.ics.items())},
            "regimes": {k: _plain(asdict(v)) for k, v in sorted(self.regimes.items())},
            "norms": catalog_to_dict(self.catalog),
            "seeds": {ic: {"train": list(s.train), "val": list(s.val), "test": list(s.test)}
                      for ic, s in sorted(self.seeds.items())},
            "sim": _plain(asdict(self.sim)),
            "pns": asdict(self.pns),
            "router": _plain(asdict(self.router)),
            "baselines": {"alpha_hybrid": self.baselines.alpha_hybrid, "rng_seed": self.baselines.rng_seed},
            "attribution": asdict(self.attribution),
            "metrics": asdict(self.metrics),
            "bucket_scheme": self.bucket_scheme,
            "val_rule": self.val_rule,
            "out_dir": self.out_dir,
        }

    def hash(self) -> str:
        """Digest of the settings that affect results (``out_dir`` excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        return config_hash(d)


def _plain(x):
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in sorted(x.items())}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, float) and x in (float("inf"), float("-inf")):
        return str(x)
    return x


def config_hash(d: Mapping) -> str:
    text = json.dumps(_plain(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _build(cls, block: Mapping | None, base=None, where: str = ""):
    block = dict(block or {})
    names = {f.name for f in fields(cls)}
    unknown = set(block) - names
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    for k, v in block.items():
        if isinstance(v, list):
            block[k] = tuple(v)
    try:
        return replace(base, **block) if base is not None else cls(**block)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or cls.__name__}: {e}") from e


_TOP = {"schema", "ics", "regimes", "norms", "seeds", "sim", "pns", "router", "baselines", "attribution",
        "metrics", "bucket_scheme", "val_rule", "out_dir"}


def config_from_dict(d: Mapping | None) -> ExperimentConfig:
    d = dict(d or {})
    unknown = set(d) - _TOP
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if d.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {d['schema']!r}")

    ics_block = d.get("ics")
    if ics_block is None:
        ics = dict(IC_PRESETS)
    elif isinstance(ics_block, list):
        missing = [i for i in ics_block if i not in IC_PRESETS]
        if missing:
            raise UnresolvedIdError(f"unknown IC presets {missing}")
        ics = {i: IC_PRESETS[i] for i in ics_block}
    else:
        ics = {}
        for ic, over in ics_block.items():
            base = IC_PRESETS.get(ic)
            over = dict(over or {})
            over.setdefault("ic_id", ic)
            if base is None and set(over) < {f.name for f in fields(ICConfig)} - {"wealth_loc", "wealth_scale"}:
                raise UnresolvedIdError(f"IC {ic!r} is not a preset and is not fully specified")
            ics[ic] = _build(ICConfig, over, base, f"ics.{ic}")

    regimes = dict(DEFAULT_REGIMES)
    for rid, over in (d.get("regimes") or {}).items():
        if rid not in DEFAULT_REGIMES:
            raise UnresolvedIdError(f"unknown regime {rid!r}")
        regimes[rid] = _build(Regime, over, DEFAULT_REGIMES[rid], f"regimes.{rid}")

    catalog = default_catalog()
    if d.get("norms"):
        try:
            catalog.update(catalog_from_dict(d["norms"]))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"norms: {e}") from e

    seeds_block = d.get("seeds") or {}
    preset = seeds_block.get("preset", "table8") if isinstance(seeds_block, Mapping) else "table8"
    if preset not in SEED_PRESETS:
        raise ConfigError(f"unknown seed preset {preset!r}")
    seeds = {ic: sp for ic, sp in SEED_PRESETS[preset](tuple(sorted(ics))).items()}
    for ic, sp in seeds_block.items():
        if ic == "preset":
            continue
        if ic not in ics:
            raise UnresolvedIdError(f"seed table names unknown IC {ic!r}")
        seeds[ic] = SeedSplit(tuple(sp.get("train", ())), tuple(sp.get("test", ())), tuple(sp.get("val", ())))

    router = _build(RouterConfig, d.get("router"), where="router")
    bl = dict(d.get("baselines") or {})
    baselines = _build(BaselineConfig, {**bl, "router": router}, where="baselines")
    return ExperimentConfig(
        ics=ics, regimes=regimes, catalog=catalog, seeds=seeds,
        sim=_build(SimParams, d.get("sim"), where="sim"),
        pns=_build(PNSConfig, d.get("pns"), where="pns"),
        router=router, baselines=baselines,
        attribution=_build(AttributionConfig, d.get("attribution"), where="attribution"),
        metrics=_build(MetricsConfig, d.get("metrics"), where="metrics"),
        bucket_scheme=d.get("bucket_scheme", "ic"),
        val_rule=d.get("val_rule", "last-train"),
        out_dir=str(d.get("out_dir", "runs/default")),
    )


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Read YAML or JSON; ``None`` falls back to ``$ICR_CONFIG`` and then to built-in defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: cannot parse: {e}") from e
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return path
