"""Router evaluation metrics and the method-comparison table."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from icr.router import Tallies

METRICS_SCHEMA = "icr.metrics/1"


@dataclass(frozen=True)
class MetricsConfig:
    w_pns: float = 0.8
    w_cov: float = 0.2
    w_gap: float = 0.1
    lambda_len: float = 0.3
    k_norm: int = 80

    def __post_init__(self):
        if min(self.w_pns, self.w_cov, self.w_gap, self.lambda_len) < 0:
            raise ValueError("metric weights must be nonnegative")
        if self.k_norm < 1:
            raise ValueError("k_norm must be at least 1")


def _stack(tallies: Tallies | Sequence[Tallies], attr: str) -> np.ndarray:
    ts = [tallies] if isinstance(tallies, Tallies) else list(tallies)
    if not ts:
        return np.zeros(0, dtype=bool)
    return np.concatenate([getattr(t, attr) for t in ts])


def pns_target(tallies: Tallies | Sequence[Tallies]) -> float:
    """Share of paired episodes in band under the routed regime and out of band under the baseline."""
    ev = _stack(tallies, "event")
    return float(ev.mean()) if ev.size else 0.0


def coverage(tallies: Tallies | Sequence[Tallies]) -> float:
    ok = _stack(tallies, "treat_ok")
    return float(ok.mean()) if ok.size else 0.0


def gap(pns_train: float, pns_test: float) -> float:
    return pns_train - pns_test


def perf(pns_test: float, cov_test: float, gap_value: float, rules: int,
         config: MetricsConfig = MetricsConfig()) -> float:
    return (config.w_pns * pns_test + config.w_cov * cov_test - config.w_gap * gap_value
            - config.lambda_len * rules / config.k_norm)


@dataclass
class MetricRow:
    method: str
    pns_train: float
    cov_train: float
    pns_test: float
    cov_test: float
    rules: int
    rules_norm: float
    gap: float
    perf: float

    @classmethod
    def build(cls, method: str, pns_train: float, cov_train: float, pns_test: float, cov_test: float,
              rules: int, config: MetricsConfig = MetricsConfig()) -> "MetricRow":
        g = gap(pns_train, pns_test)
        return cls(method, pns_train, cov_train, pns_test, cov_test, int(rules), rules / config.k_norm, g,
                   perf(pns_test, cov_test, g, rules, config))

    @classmethod
    def from_tallies(cls, method: str, train: Sequence[Tallies], test: Sequence[Tallies], rules: int,
                     config: MetricsConfig = MetricsConfig()) -> "MetricRow":
        return cls.build(method, pns_target(train), coverage(train), pns_target(test), coverage(test), rules,
                         config)


def save_metric_rows(rows: Iterable[MetricRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(MetricRow)]
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={METRICS_SCHEMA}\n")
        w = csv.writer(fh)
        w.writerow(names)
        for r in rows:
            d = asdict(r)
            w.writerow([d[n] if n in ("method", "rules") else repr(float(d[n])) for n in names])
    return path


def load_metric_rows(path: str | Path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"#schema={METRICS_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(MetricRow(r["method"], *(float(r[k]) for k in ("pns_train", "cov_train", "pns_test", "cov_test")),
                             int(r["rules"]), float(r["rules_norm"]), float(r["gap"]), float(r["perf"])))
    return out


def format_table(rows: Sequence[MetricRow]) -> str:
    head = ("Method", "PNS_train", "Cov_train", "PNS_test", "Cov_test", "Rules", "Rules_norm", "Gap", "Perf")
    body = [(r.method, *(f"{v:.3f}" for v in (r.pns_train, r.cov_train, r.pns_test, r.cov_test)), str(r.rules),
             f"{r.rules_norm:.3f}", f"{r.gap:.3f}", f"{r.perf:.3f}") for r in rows]
    widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(head), line(["-" * w for w in widths]), *map(line, body)]) + "\n"
