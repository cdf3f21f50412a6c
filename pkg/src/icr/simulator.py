"""Seedable platform-user market with interchangeable governance regimes.

One step is one year. A platform sets five levers (subsidy rate, exposure
threshold, commission, fee-tier threshold, off-transaction spend share); users
in three resource groups answer with an investment share ``p`` and an activity
level ``h``. Exogenous shocks come from :class:`icr.noise.NoiseStream`, so two
regimes run on the same seed see the same shocks.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from icr.noise import NoiseStream
from icr.norms import GROUPS, AttainmentOutcome, NormBand, StatSeries, attainment

EPISODE_SCHEMA = "icr.episode/1"
REGIME_IDS: tuple[str, ...] = ("NI", "GMV", "FAI", "BAL", "UW")

LEVER_COLUMNS = ("sigma_low", "sigma_mid", "sigma_high", "kappa", "f", "kappa_f", "spend_share", "r_t", "gmv")
EPISODE_COLUMNS = (
    ("step",)
    + LEVER_COLUMNS
    + tuple(f"phi1_{g}" for g in GROUPS)
    + tuple(f"phi2_{g}" for g in GROUPS)
    + tuple(f"p_{g}" for g in GROUPS)
    + tuple(f"h_{g}" for g in GROUPS)
)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ICConfig:
    ic_id: str
    crra: float
    ife: float
    e_p: float
    e_q: float
    rho_e: float
    sigma_e: float
    super_e: float
    # log-normal initial wealth per group: (log-location, log-scale)
    wealth_loc: Mapping[str, float] = field(default_factory=lambda: {"low": 0.0, "mid": 1.0, "high": 2.0})
    wealth_scale: Mapping[str, float] = field(default_factory=lambda: {"low": 0.5, "mid": 0.5, "high": 0.6})

    def __post_init__(self):
        if not (0.0 <= self.e_p <= 1.0 and 0.0 <= self.e_q <= 1.0):
            raise ValueError(f"{self.ic_id}: superstar probabilities must lie in [0, 1]")
        if not 0.0 < self.rho_e < 1.0:
            raise ValueError(f"{self.ic_id}: rho_e must lie in (0, 1)")
        if self.sigma_e <= 0.0:
            raise ValueError(f"{self.ic_id}: sigma_e must be positive")
        if self.super_e < 1.0:
            raise ValueError(f"{self.ic_id}: super_e must be >= 1")
        if self.crra <= 0.0:
            raise ValueError(f"{self.ic_id}: crra must be positive")


IC_PRESETS: dict[str, ICConfig] = {
    "IC1": ICConfig("IC1", 1.0, 2.0, 2.2e-6, 0.990, 0.982, 0.20, 504.3),
    "IC2": ICConfig("IC2", 1.5, 1.8, 5.0e-6, 0.985, 0.975, 0.18, 400.0,
                    wealth_loc={"low": -0.2, "mid": 0.8, "high": 1.8}),
    "IC3": ICConfig("IC3", 0.7, 2.5, 8.0e-6, 0.985, 0.990, 0.15, 350.0,
                    wealth_loc={"low": 0.2, "mid": 1.2, "high": 2.4}),
    "IC4": ICConfig("IC4", 1.2, 2.2, 1.0e-5, 0.920, 0.950, 0.22, 450.0,
                    wealth_loc={"low": 0.6, "mid": 1.2, "high": 1.8}),
    "IC5": ICConfig("IC5", 2.0, 1.5, 3.0e-6, 0.995, 0.990, 0.25, 600.0,
                    wealth_loc={"low": -0.5, "mid": 1.0, "high": 3.0},
                    wealth_scale={"low": 0.6, "mid": 0.6, "high": 0.9}),
}


@dataclass(frozen=True)
class SimParams:
    n_users: int = 100
    horizon: int = 300
    burn_in: int = 250
    window: int = 50
    attain_q: float = 0.9
    productivity: tuple[float, float, float] = (1.0, 3.0, 9.0)  # A_g
    h_max: float = 1.0
    inv_exponent: float = 0.5
    organic_share: float = 0.2  # revenue fraction kept by unexposed users
    tier_discount: float = 0.5
    # user heuristics
    p0: tuple[float, float, float] = (0.3, 0.5, 0.7)
    h0: tuple[float, float, float] = (0.45, 0.5, 0.55)
    p_response: float = 0.5  # divided by crra
    h_exposure: float = 0.3
    h_tier: float = 0.1
    h_spend: float = 0.5
    p_bounds: tuple[float, float] = (0.01, 0.99)
    # compactness clips
    inv_max: float = 1e9
    log_z_bound: float = 6.0

    def __post_init__(self):
        if self.burn_in + self.window > self.horizon:
            raise ValueError("horizon must cover burn_in + window")


@dataclass(frozen=True)
class Regime:
    """Lever set-points plus small proportional feedback on GMV growth."""

    regime_id: str
    sigma: tuple[float, float, float]
    kappa: float
    f: float
    kappa_f: float
    spend_share: float
    feedback: Mapping[str, float] = field(default_factory=dict)

    def levers(self, growth: float) -> "LeverState":
        g = math.tanh(growth)
        fb = self.feedback
        sigma = np.clip(np.asarray(self.sigma, dtype=float) + fb.get("sigma", 0.0) * g, 0.0, 1.0)
        return LeverState(
            sigma=sigma,
            kappa=_clip01(self.kappa + fb.get("kappa", 0.0) * g),
            f=_clip01(self.f + fb.get("f", 0.0) * g),
            kappa_f=max(0.0, self.kappa_f * (1.0 + fb.get("kappa_f", 0.0) * g)),
            spend_share=_clip01(self.spend_share + fb.get("spend_share", 0.0) * g),
        )


_FB = {"sigma": -0.01, "kappa": 0.01, "f": 0.01, "kappa_f": 0.05, "spend_share": 0.01}

DEFAULT_REGIMES: dict[str, Regime] = {
    # neutral midpoints; tier threshold out of reach
    "NI": Regime("NI", (0.5, 0.5, 0.5), 0.5, 0.5, 1e12, 0.10, _FB),
    # low exposure/tier thresholds, high commission, flat low subsidy
    "GMV": Regime("GMV", (0.1, 0.1, 0.1), 0.1, 0.6, 0.05, 0.12, _FB),
    # low spend, low tier threshold
    "FAI": Regime("FAI", (0.3, 0.3, 0.3), 0.2, 0.31, 0.02, 0.04, _FB),
    # group-regressive subsidy
    "BAL": Regime("BAL", (1.0, 0.7, 0.02), 0.4, 0.27, 1e12, 0.08, _FB),
    # FAI with slightly more spend and subsidy
    "UW": Regime("UW", (0.32, 0.32, 0.32), 0.2, 0.3, 0.0, 0.06, _FB),
}


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


# ---------------------------------------------------------------------------
# state


@dataclass
class LeverState:
    sigma: np.ndarray  # per group
    kappa: float
    f: float
    kappa_f: float
    spend_share: float
    gmv: float = 0.0

    @property
    def r_t(self) -> float:
        return self.spend_share * self.gmv

    def row(self) -> list[float]:
        return [*map(float, self.sigma), self.kappa, self.f, self.kappa_f, self.spend_share, self.r_t, self.gmv]


@dataclass
class UserState:
    """Vectorised user state; index ``i`` is user ``i``."""

    group: np.ndarray  # int group index
    wealth: np.ndarray
    inv: np.ndarray
    log_z: np.ndarray
    superstar: np.ndarray  # bool
    p: np.ndarray
    h: np.ndarray
    rev: np.ndarray

    def copy(self) -> "UserState":
        return UserState(*(np.array(getattr(self, k), copy=True) for k in self.__dataclass_fields__))


@dataclass
class SystemState:
    t: int
    users: UserState
    gmv_hist: tuple[float, float] = (0.0, 0.0)  # (Y_{t-2}, Y_{t-1})


@dataclass(frozen=True)
class Context:
    """Initial-state features ``X0``; regime independent by construction."""

    ic_id: str
    agg_wealth: float
    median_wealth: tuple[float, float, float]

    def features(self) -> dict:
        return {
            "ic_id": self.ic_id,
            "agg_wealth": self.agg_wealth,
            **{f"median_wealth_{g}": w for g, w in zip(GROUPS, self.median_wealth)},
        }

    @classmethod
    def from_features(cls, d: Mapping) -> "Context":
        return cls(str(d["ic_id"]), float(d["agg_wealth"]),
                   tuple(float(d[f"median_wealth_{g}"]) for g in GROUPS))


@dataclass
class StepOutput:
    levers: LeverState
    subsidy: np.ndarray
    fee: np.ndarray
    phi1: np.ndarray  # per group
    phi2: np.ndarray


# ---------------------------------------------------------------------------
# structural equations


def potential_revenue(z, multiplier, A, inv, h, ife, inv_exponent=0.5):
    """``q = multiplier * z * A_g * inv**inv_exponent * h**ife``."""
    return multiplier * z * A * np.power(inv, inv_exponent) * np.power(h, ife)


def take_rate(rev, f, kappa_f, tier_discount=0.5):
    """Commission actually charged: ``f`` below the tier threshold, discounted at or above it."""
    return np.where(rev >= kappa_f, f * tier_discount, f)


def settle(rev, inv, sigma, take, p):
    """Budget identity: ``inv' = p * (rev + subsidy - fee + inv)``.

    Returns ``(subsidy, fee, inflow, inv_next)``.
    """
    subsidy = sigma * rev
    fee = take * rev
    inflow = rev + subsidy - fee + inv
    return subsidy, fee, inflow, p * inflow


def group_ratio(num, den, group, n_groups=3):
    ns = np.bincount(group, weights=num, minlength=n_groups)
    ds = np.bincount(group, weights=den, minlength=n_groups)
    out = np.zeros(n_groups)
    nz = ds > 0
    out[nz] = ns[nz] / ds[nz]
    # positive numerator over an empty denominator: saturate instead of inf
    out[~nz & (ns > 0)] = ns[~nz & (ns > 0)] / 1e-12
    return out


def user_groups(n_users: int) -> np.ndarray:
    base = n_users // 3
    sizes = [n_users - 2 * base, base, base]
    return np.repeat(np.arange(3), sizes)


def initial_state(ic: ICConfig, noise: NoiseStream, params: SimParams) -> tuple[SystemState, Context]:
    n = params.n_users
    grp = user_groups(n)
    loc = np.array([ic.wealth_loc[g] for g in GROUPS])[grp]
    scale = np.array([ic.wealth_scale[g] for g in GROUPS])[grp]
    wealth = np.exp(loc + scale * noise.normal("init_wealth", -1, n))
    stat_sd = ic.sigma_e / math.sqrt(1.0 - ic.rho_e**2)
    log_z = np.clip(stat_sd * noise.normal("init_z", -1, n), -params.log_z_bound, params.log_z_bound)
    p0 = np.asarray(params.p0)[grp]
    users = UserState(
        group=grp,
        wealth=wealth,
        inv=p0 * wealth,
        log_z=log_z,
        superstar=np.zeros(n, dtype=bool),
        p=p0.copy(),
        h=np.asarray(params.h0)[grp].astype(float),
        rev=np.zeros(n),
    )
    ctx = Context(
        ic.ic_id,
        float(wealth.sum()),
        tuple(float(np.median(wealth[grp == k])) for k in range(3)),
    )
    return SystemState(0, users), ctx


def step(state: SystemState, regime: Regime, noise: NoiseStream, ic: ICConfig,
         params: SimParams = SimParams()) -> tuple[SystemState, StepOutput]:
    """Advance one year. Pure in its inputs; all randomness comes from ``noise`` at step ``state.t``."""
    t, u = state.t, state.users
    n = len(u.group)
    grp = u.group

    y2, y1 = state.gmv_hist
    growth = math.log(y1 / y2) if (y1 > 0 and y2 > 0) else 0.0
    lev = regime.levers(growth)
    sigma_u = lev.sigma[grp]

    # users decide from last year's tier status
    tier_prev = u.rev >= lev.kappa_f
    expected_take = np.where(tier_prev, lev.f * params.tier_discount, lev.f)
    lo, hi = params.p_bounds
    p = np.clip(np.asarray(params.p0)[grp] + params.p_response / ic.crra * (sigma_u - expected_take), lo, hi)
    h = np.clip(
        np.asarray(params.h0)[grp]
        + params.h_exposure * (1.0 - lev.kappa)
        + params.h_tier * tier_prev
        + params.h_spend * lev.spend_share,
        0.0,
        params.h_max,
    )

    # exogenous shocks
    eps = noise.normal("productivity", t, n)
    uni = noise.uniform("superstar", t, n)
    log_z = np.clip(ic.rho_e * u.log_z + ic.sigma_e * eps, -params.log_z_bound, params.log_z_bound)
    superstar = np.where(u.superstar, uni < ic.e_q, uni < ic.e_p)
    mult = np.where(superstar, ic.super_e, 1.0)

    A = np.asarray(params.productivity)[grp]
    q = potential_revenue(np.exp(log_z), mult, A, u.inv, h, ic.ife, params.inv_exponent)
    threshold = np.quantile(q, lev.kappa, method="inverted_cdf") if n else 0.0
    exposed = q >= threshold
    rev = np.where(exposed, q, params.organic_share * q)

    take = take_rate(rev, lev.f, lev.kappa_f, params.tier_discount)
    subsidy, fee, inflow, inv_next = settle(rev, u.inv, sigma_u, take, p)
    inv_next = np.clip(inv_next, 0.0, params.inv_max)

    phi1 = group_ratio(subsidy, fee, grp)
    phi2 = group_ratio(rev, u.inv, grp)
    lev.gmv = float(rev.sum())

    users = UserState(grp, inflow, inv_next, log_z, superstar, p, h, rev)
    nxt = SystemState(t + 1, users, (y1, lev.gmv))
    return nxt, StepOutput(lev, subsidy, fee, phi1, phi2)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeRecord:
    ic_id: str
    regime_id: str
    seed: int
    horizon: int
    burn_in: int
    window: int
    x0: Context
    levers: np.ndarray  # (horizon, len(LEVER_COLUMNS))
    phi1: np.ndarray  # (horizon, 3)
    phi2: np.ndarray
    p_mean: np.ndarray  # (horizon, 3) per-group mean response
    h_mean: np.ndarray
    p_users: np.ndarray | None = None  # (horizon, n_users), not serialised
    h_users: np.ndarray | None = None

    def stat_series(self, stat: str, group: str) -> StatSeries:
        arr = {"phi1": self.phi1, "phi2": self.phi2}[stat]
        return StatSeries(stat, group, arr[:, GROUPS.index(group)], self.burn_in, self.window)

    def lever(self, name: str) -> np.ndarray:
        return self.levers[:, LEVER_COLUMNS.index(name)]

    def table(self) -> np.ndarray:
        steps = np.arange(self.horizon, dtype=float)[:, None]
        return np.hstack([steps, self.levers, self.phi1, self.phi2, self.p_mean, self.h_mean])

    def header(self) -> dict:
        return {
            "schema": EPISODE_SCHEMA,
            "ic_id": self.ic_id,
            "regime_id": self.regime_id,
            "seed": self.seed,
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "window": self.window,
            "columns": list(EPISODE_COLUMNS),
            "x0": self.x0.features(),
        }

    def same_as(self, other: "EpisodeRecord") -> bool:
        return self.header() == other.header() and np.array_equal(self.table(), other.table())

    def save(self, path: str | Path) -> Path:
        """Write ``<path>.csv`` (one row per step) and ``<path>.json`` (header sidecar)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path = path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPISODE_COLUMNS)
            for row in self.table():
                w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])
        path.with_suffix(".json").write_text(json.dumps(self.header(), indent=2, sort_keys=True) + "\n")
        return csv_path

    @classmethod
    def load(cls, path: str | Path) -> "EpisodeRecord":
        path = Path(path)
        head = json.loads(path.with_suffix(".json").read_text())
        if head.get("schema") != EPISODE_SCHEMA:
            raise ValueError(f"{path}: unexpected schema {head.get('schema')!r}")
        with open(path.with_suffix(".csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != EPISODE_COLUMNS:
            raise ValueError(f"{path}: unexpected columns")
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(EPISODE_COLUMNS))
        nl = len(LEVER_COLUMNS)
        cut = np.cumsum([1, nl, 3, 3, 3, 3])
        parts = np.split(data, cut[:-1], axis=1)
        return cls(
            ic_id=head["ic_id"], regime_id=head["regime_id"], seed=int(head["seed"]),
            horizon=int(head["horizon"]), burn_in=int(head["burn_in"]), window=int(head["window"]),
            x0=Context.from_features(head["x0"]),
            levers=parts[1], phi1=parts[2], phi2=parts[3], p_mean=parts[4], h_mean=parts[5],
        )


def _group_mean(x: np.ndarray, grp: np.ndarray) -> np.ndarray:
    return np.bincount(grp, weights=x, minlength=3) / np.bincount(grp, minlength=3)


def run_episode(ic: ICConfig, regime: Regime, seed: int, horizon: int | None = None,
                params: SimParams = SimParams(), noise: NoiseStream | None = None,
                keep_users: bool = False) -> EpisodeRecord:
    if horizon is not None and horizon != params.horizon:
        params = replace(params, horizon=horizon)
    if params.horizon < 1:
        raise ValueError("horizon must be positive")
    noise = noise if noise is not None else NoiseStream(seed)
    state, ctx = initial_state(ic, noise, params)
    H, n = params.horizon, params.n_users
    levers = np.empty((H, len(LEVER_COLUMNS)))
    phi1, phi2 = np.empty((H, 3)), np.empty((H, 3))
    p_mean, h_mean = np.empty((H, 3)), np.empty((H, 3))
    p_users = np.empty((H, n)) if keep_users else None
    h_users = np.empty((H, n)) if keep_users else None
    for t in range(H):
        state, out = step(state, regime, noise, ic, params)
        u = state.users
        levers[t] = out.levers.row()
        phi1[t], phi2[t] = out.phi1, out.phi2
        p_mean[t] = _group_mean(u.p, u.group)
        h_mean[t] = _group_mean(u.h, u.group)
        if keep_users:
            p_users[t], h_users[t] = u.p, u.h
    return EpisodeRecord(ic.ic_id, regime.regime_id, int(seed), H, params.burn_in, params.window, ctx,
                         levers, phi1, phi2, p_mean, h_mean, p_users, h_users)


def twin_run(ic: ICConfig, theta: Regime, theta0: Regime, seed: int,
             params: SimParams = SimParams()) -> tuple[EpisodeRecord, EpisodeRecord]:
    """Run ``theta`` and ``theta0`` on the same seed, hence the same exogenous shocks."""
    return run_episode(ic, theta, seed, params=params), run_episode(ic, theta0, seed, params=params)


def compute_outcomes(record: EpisodeRecord, catalog: Mapping[str, NormBand],
                     q: float = 0.9) -> dict[str, AttainmentOutcome]:
    out = {}
    for norm_id, band in catalog.items():
        series = {g: record.stat_series(band.stat, g) for g in band.groups}
        out[norm_id] = attainment(series, band, q)
    return out
