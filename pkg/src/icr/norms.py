"""Norm bands, window statistics and the finite-horizon attainment event."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

GROUPS: tuple[str, ...] = ("low", "mid", "high")
NORM_IDS: tuple[str, ...] = ("ST-1", "ST-2", "RI-1", "RI-2")

# norm id -> statistic it constrains
NORM_STAT = {"ST-1": "phi1", "ST-2": "phi1", "RI-1": "phi2", "RI-2": "phi2"}


class InsufficientLengthError(ValueError):
    pass


class MissingGroupError(KeyError):
    pass


@dataclass(frozen=True)
class Interval:
    lower: float = -math.inf
    lower_closed: bool = False
    upper: float = math.inf
    upper_closed: bool = False

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty interval: lower={self.lower} upper={self.upper}")

    @classmethod
    def parse(cls, text: str) -> "Interval":
        """Parse standard notation such as ``(0, 0.7]`` or ``[1.05, inf)``."""
        s = text.strip()
        if s[0] not in "([" or s[-1] not in ")]":
            raise ValueError(f"bad interval literal {text!r}")
        lo, hi = (part.strip() for part in s[1:-1].split(","))
        return cls(
            lower=_parse_bound(lo),
            lower_closed=s[0] == "[" and math.isfinite(_parse_bound(lo)),
            upper=_parse_bound(hi),
            upper_closed=s[-1] == "]" and math.isfinite(_parse_bound(hi)),
        )

    def __str__(self) -> str:
        lo = "-inf" if self.lower == -math.inf else f"{self.lower:g}"
        hi = "inf" if self.upper == math.inf else f"{self.upper:g}"
        return f"{'[' if self.lower_closed else '('}{lo}, {hi}{']' if self.upper_closed else ')'}"

    def contains(self, value: float) -> bool:
        return band_contains(value, self)


def _parse_bound(tok: str) -> float:
    tok = tok.lower().replace("∞", "inf")
    if tok in ("inf", "+inf"):
        return math.inf
    if tok == "-inf":
        return -math.inf
    return float(tok)


@dataclass(frozen=True)
class NormBand:
    norm_id: str
    per_group: Mapping[str, Interval]
    stat: str = ""

    def __post_init__(self):
        if not self.per_group:
            raise ValueError(f"{self.norm_id}: at least one group must be constrained")
        if not self.stat:
            object.__setattr__(self, "stat", NORM_STAT.get(self.norm_id, "phi1"))

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(g for g in GROUPS if g in self.per_group) + tuple(
            g for g in self.per_group if g not in GROUPS
        )

    @classmethod
    def from_eta_eps(cls, norm_id: str, eta: Mapping[str, float], eps: Mapping[str, float],
                     stat: str = "") -> "NormBand":
        """Closed rectangular band ``[eta - eps, eta + eps]`` per group."""
        return cls(
            norm_id,
            {g: Interval(eta[g] - eps[g], True, eta[g] + eps[g], True) for g in eta},
            stat,
        )


def band_contains(value: float, interval: Interval) -> bool:
    if not math.isfinite(value):
        return False
    lo_ok = value >= interval.lower if interval.lower_closed else value > interval.lower
    hi_ok = value <= interval.upper if interval.upper_closed else value < interval.upper
    return lo_ok and hi_ok


def default_catalog() -> dict[str, NormBand]:
    """The four norm bands (ST-1, ST-2, RI-1, RI-2) with their published intervals."""
    P = Interval.parse
    return {
        "ST-1": NormBand("ST-1", {"low": P("(0, 0.7]"), "mid": P("(0, 1.0]"), "high": P("(0, 1.3]")}),
        "ST-2": NormBand("ST-2", {"low": P("[3.5, inf)"), "mid": P("[2.3, inf)"), "high": P("(0, 2.0]")}),
        "RI-1": NormBand("RI-1", {"low": P("[1.05, inf)"), "high": P("(0, 0.4]")}),
        "RI-2": NormBand("RI-2", {"low": P("(0, 0.62]"), "high": P("(0.8, inf)")}),
    }


def catalog_from_dict(spec: Mapping[str, Mapping[str, str]]) -> dict[str, NormBand]:
    """Build a catalog from ``{norm_id: {group: "(lo, hi]"}}``; ``stat`` keys are honoured."""
    out = {}
    for norm_id, groups in spec.items():
        groups = dict(groups)
        stat = groups.pop("stat", "")
        out[norm_id] = NormBand(norm_id, {g: Interval.parse(v) for g, v in groups.items()}, stat)
    return out


def catalog_to_dict(catalog: Mapping[str, NormBand]) -> dict[str, dict[str, str]]:
    return {
        nid: {"stat": band.stat, **{g: str(iv) for g, iv in band.per_group.items()}}
        for nid, band in catalog.items()
    }


@dataclass
class StatSeries:
    stat_id: str
    group: str
    values: np.ndarray
    burn_in: int = 250
    window: int = 50

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def final_window(self) -> np.ndarray:
        n = len(self.values)
        if self.window < 1 or self.burn_in < 0 or self.burn_in + self.window > n:
            raise InsufficientLengthError(
                f"{self.stat_id}/{self.group}: need burn_in+window={self.burn_in + self.window}, have {n}"
            )
        return self.values[n - self.window:]


def window_average(series: StatSeries) -> float:
    """Mean of the last ``window`` values (which must lie after burn-in)."""
    return float(np.mean(series.final_window()))


def dist_inf(point: Sequence[float], band: NormBand) -> float:
    """Sup-norm distance from ``point`` (ordered as ``band.groups``) to the band's closed hull."""
    x = np.asarray(point, dtype=float)
    groups = band.groups
    if x.shape != (len(groups),):
        raise ValueError(f"dimension mismatch: point has shape {x.shape}, band has {len(groups)} coordinates")
    worst = 0.0
    for xi, g in zip(x, groups):
        iv = band.per_group[g]
        below = iv.lower - xi if math.isfinite(iv.lower) else 0.0
        above = xi - iv.upper if math.isfinite(iv.upper) else 0.0
        worst = max(worst, below, above)
    return float(worst)


@dataclass
class AttainmentOutcome:
    norm_id: str
    bits: dict[str, int] = field(default_factory=dict)
    excursion_fraction: dict[str, float] = field(default_factory=dict)
    window_mean: dict[str, float] = field(default_factory=dict)

    def all_attained(self, groups: Sequence[str] | None = None) -> bool:
        gs = self.bits.keys() if groups is None else groups
        return all(self.bits[g] == 1 for g in gs)


def attainment(series_by_group: Mapping[str, StatSeries], band: NormBand, q: float = 0.9) -> AttainmentOutcome:
    """Decide per-group attainment on the final window.

    A group attains iff its window mean lies in the interval and at least a
    fraction ``q`` of the per-step values in the window do too.
    """
    out = AttainmentOutcome(band.norm_id)
    for g in band.groups:
        if g not in series_by_group:
            raise MissingGroupError(f"{band.norm_id}: no series for constrained group {g!r}")
        iv = band.per_group[g]
        vals = series_by_group[g].final_window()
        inside = np.fromiter((band_contains(v, iv) for v in vals), dtype=bool, count=len(vals))
        mean = float(np.mean(vals))
        frac_in = float(inside.mean())
        out.window_mean[g] = mean
        out.excursion_fraction[g] = 1.0 - frac_in
        need = math.ceil(q * len(vals) - 1e-9)
        out.bits[g] = int(band_contains(mean, iv) and int(inside.sum()) >= need)
    return out
