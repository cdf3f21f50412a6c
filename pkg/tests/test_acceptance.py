"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, echoed in the pytest terminal summary.
"""

from __future__ import annotations

import time

import numpy as np

from conftest import record_acceptance
from oracles import BANDS, PUBLISHED_ROWS, exhaustive_best, pns_count, router_J, tiny_instance, w1_quantile_oracle, wilson_oracle

from icr.attribution import holm_bonferroni, permutation_test, wasserstein1
from icr.baselines import corr_greedy, corr_scorer
from icr.ergodic import TwoStateChain
from icr.metrics import MetricsConfig, coverage, gap, perf, pns_target
from icr.noise import NoiseStream
from icr.norms import band_contains, default_catalog
from icr.outcomes import OutcomeTable
from icr.pns import ALL, PairedOutcome, enumerate_contracts, estimate_pns, filter_contracts, wilson_ci
from icr.router import RouterConfig, bucketize, evaluate_router, learn_router, pns_scorer, rule_from_contract
from icr.simulator import DEFAULT_REGIMES, IC_PRESETS, REGIME_IDS, compute_outcomes, run_episode
from icr.synthetic import BASELINE, GENUINE, SPURIOUS, SYN_GROUPS, SYN_NORM, confounded_tables


def test_c01_table2_arithmetic():
    t0 = time.perf_counter()
    cfg = MetricsConfig(0.8, 0.2, 0.1, 0.3, 80)
    worst_gap = worst_perf = 0.0
    for _, ptr, _ctr, pte, cte, rules, _rn, g_pub, perf_pub in PUBLISHED_ROWS:
        g = gap(ptr, pte)
        worst_gap = max(worst_gap, abs(g - g_pub))
        worst_perf = max(worst_perf, abs(perf(pte, cte, g, rules, cfg) - perf_pub))
    secs = time.perf_counter() - t0
    ok = worst_gap <= 0.001 + 1e-12 and worst_perf <= 0.002 + 1e-12 and secs < 1.0
    record_acceptance(1, "published metric rows: gap/perf arithmetic", ok,
                      f"(max |gap err|={worst_gap:.4f}, max |perf err|={worst_perf:.4f}, {secs:.3f}s)")
    assert ok


def test_c02_pns_oracle_equivalence():
    rng = np.random.default_rng(2024)
    mismatches, worst_ci = 0, 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        G = int(rng.integers(1, 4))
        groups = ("low", "mid", "high")[:G]
        treat = rng.integers(0, 2, size=(n, G))
        base = rng.integers(0, 2, size=(n, G))
        flags = rng.random(n) < 0.8
        flags[rng.integers(n)] = True
        pairs = [PairedOutcome(i, {"psi": bool(flags[i])},
                               {("N", g): int(treat[i, j]) for j, g in enumerate(groups)},
                               {("N", g): int(base[i, j]) for j, g in enumerate(groups)}) for i in range(n)]
        est = estimate_pns(pairs, "psi", "N", ALL)
        k = pns_count(treat.tolist(), base.tolist(), flags.tolist())
        if est.k != k or est.n != int(flags.sum()) or est.value != k / int(flags.sum()):
            mismatches += 1
        lo, hi = wilson_oracle(est.k, est.n)
        worst_ci = max(worst_ci, abs(lo - est.ci[0]), abs(hi - est.ci[1]))
    spot = wilson_ci(7, 10, 0.95)
    spot_ok = abs(spot[0] - 0.3968) <= 5e-4 and abs(spot[1] - 0.8923) <= 5e-4
    ok = mismatches == 0 and worst_ci <= 1e-9 and spot_ok
    record_acceptance(2, "PNS estimator and Wilson oracle", ok,
                      f"(count mismatches={mismatches}, max CI err={worst_ci:.1e}, "
                      f"7/10 -> ({spot[0]:.4f}, {spot[1]:.4f}))")
    assert ok


def test_c03_router_oracle():
    t0 = time.perf_counter()
    cfg = RouterConfig()
    short, worst = [], 0.0
    for s in range(200):
        table, rules = tiny_instance(np.random.default_rng(s))
        # validation is an exact copy under fresh episode ids, so the objective is the same on both splits
        val = OutcomeTable(table.contexts, [x + 10_000 for x in table.seeds], table.flags, table.bits, table.groups)
        buckets = bucketize(table.contexts)
        task = ("T0", "N")
        router = learn_router(rules, table, val, buckets, cfg, task)
        labels = buckets.assign(table.contexts).tolist()
        nb = len(buckets.keys)
        gain = pns_scorer(rules, table, task, np.asarray(labels), nb, cfg).tolist()
        match = [table.flags[r.psi].tolist() for r in rules]
        ids = [r.rule_id for r in rules]
        order = [ids.index(r.rule_id) for r in router.rules]
        J = router_J(order, match, labels, buckets.weights.tolist(), gain, cfg.lam)
        best = exhaustive_best(len(rules), match, labels, buckets.weights.tolist(), gain, cfg.lam)
        if J < best - (cfg.tau_prune + cfg.eps_imp):
            short.append(s)
            worst = max(worst, best - J)
    secs = time.perf_counter() - t0
    ok = not short and secs < 30.0
    record_acceptance(3, "router vs exhaustive search on tiny instances", ok,
                      f"({200 - len(short)}/200 within tolerance, worst shortfall={worst:.3f}, {secs:.1f}s)")
    assert ok, f"instances short of the exhaustive optimum: {short}"


def test_c04_twin_world_determinism(tmp_path):
    from icr.config import ExperimentConfig
    from icr.pipeline import simulate_all

    keys = [(ic, 1000 + 100 * int(ic[2:]) + s) for ic in sorted(IC_PRESETS) for s in range(1, 5)]
    assert len(keys) == 20
    draws_equal = True
    for ic, seed in keys:
        traces = []
        for rid in REGIME_IDS:
            noise = NoiseStream(seed, record=True)
            run_episode(IC_PRESETS[ic], DEFAULT_REGIMES[rid], seed, noise=noise)
            traces.append(noise.trace)
        ref = traces[0]
        for tr in traces[1:]:
            if tr.keys() != ref.keys() or any(tr[k].tobytes() != ref[k].tobytes() for k in ref):
                draws_equal = False

    cfg = ExperimentConfig()

    def dump(recs, root):
        out = {}
        for (ic, seed), arms in sorted(recs.items()):
            for rid, rec in sorted(arms.items()):
                p = rec.save(root / f"{ic}_{seed}_{rid}")
                out[p.name] = p.read_bytes() + p.with_suffix(".json").read_bytes()
        return out

    a = dump(simulate_all(cfg, keys, jobs=1), tmp_path / "a")
    b = dump(simulate_all(cfg, keys, jobs=1), tmp_path / "b")
    c = dump(simulate_all(cfg, keys, jobs=4), tmp_path / "c")
    repeat_equal = a == b == c and len(a) == 100
    ok = draws_equal and repeat_equal
    record_acceptance(4, "twin-world noise identity and byte-identical reruns", ok,
                      f"(draws identical={draws_equal}, reruns identical across jobs 1/1/4={repeat_equal})")
    assert ok


def test_c05_band_catalog():
    cat = default_catalog()
    probes_total, wrong = 0, []
    exact = sum(len(b.per_group) for b in cat.values()) == 10
    for norm, group, lo, lo_closed, hi, hi_closed in BANDS:
        iv = cat[norm].per_group[group]
        exact &= (iv.lower, iv.lower_closed, iv.upper, iv.upper_closed) == (lo, lo_closed, hi, hi_closed)
        probes = []
        if np.isfinite(lo):
            probes += [(lo, lo_closed), (np.nextafter(lo, -np.inf), False), (np.nextafter(lo, np.inf), True)]
        if np.isfinite(hi):
            probes += [(hi, hi_closed), (np.nextafter(hi, np.inf), False), (np.nextafter(hi, -np.inf), True)]
        mid = (lo + hi) / 2 if np.isfinite(hi) else lo + 10.0
        probes += [(mid, True), (1e9 if not np.isfinite(hi) else hi + 1.0, not np.isfinite(hi)), (-1.0, False)]
        for x, want in probes:
            probes_total += 1
            if band_contains(float(x), iv) != want:
                wrong.append((norm, group, float(x)))
    named = [band_contains(0.7, cat["ST-1"].per_group["low"]), band_contains(1.05, cat["RI-1"].per_group["low"]),
             not band_contains(0.71, cat["ST-1"].per_group["low"]), band_contains(0.71, cat["ST-1"].per_group["mid"])]
    ok = exact and not wrong and all(named) and len(BANDS) == 10
    record_acceptance(5, "band catalog fidelity", ok, f"({probes_total - len(wrong)}/{probes_total} probes agree)")
    assert ok, wrong


def test_c06_confounding_separation():
    task = (BASELINE, SYN_NORM)
    wins, details, excluded, spurious_high = 0, [], True, True
    for s in range(10):
        t = confounded_tables(s)
        train, val, test = t["train"], t["val"], t["test"]
        pairs = {(th, BASELINE): train.pairs(th, BASELINE) for th in (SPURIOUS, GENUINE)}
        pool = enumerate_contracts(pairs, sorted(train.flags), {SYN_NORM: SYN_GROUPS})
        kept = filter_contracts(pool)
        spurious = [c for c in pool if c.theta == SPURIOUS and c.psi == "TRUE" and c.target_groups == ALL][0]
        excluded &= spurious.estimate.value < 0.5 and spurious not in kept
        buckets = bucketize(train.contexts)
        labels = buckets.assign(train.contexts)
        r = corr_scorer([rule_from_contract(spurious)], train, task, labels, len(buckets.keys), RouterConfig())
        spurious_high &= float((r @ buckets.weights)[0]) > 0.5
        pns_router = learn_router(kept, train, val, buckets, RouterConfig(), task)
        corr_router = corr_greedy(pool, train, val, buckets, task=task)
        a = pns_target(evaluate_router(pns_router, test))
        b = pns_target(evaluate_router(corr_router, test))
        wins += a > b
        details.append(f"{a:.2f}>{b:.2f}" if a > b else f"{a:.2f}<={b:.2f}")
    ok = excluded and spurious_high and wins >= 9
    record_acceptance(6, "confounding separation (PNS vs Pearson)", ok,
                      f"(spurious excluded={excluded}, Pearson>0.5={spurious_high}, PNS wins {wins}/10)")
    assert ok, details


def test_c07_attribution_oracles():
    rng = np.random.default_rng(7)
    eq_exact, uneq_err = True, 0.0
    for _ in range(200):
        n = int(rng.integers(1, 20))
        a, b = rng.normal(size=n), rng.normal(1.0, 2.0, size=n)
        eq_exact &= wasserstein1(a, b) == float(np.mean(np.abs(np.sort(a) - np.sort(b))))
        c = rng.normal(size=int(rng.integers(1, 15)))
        d = rng.exponential(size=int(rng.integers(1, 15)))
        uneq_err = max(uneq_err, abs(wasserstein1(c, d) - w1_quantile_oracle(c, d)))
    holm = holm_bonferroni([0.01, 0.04, 0.03], 0.05) == [True, False, False]
    same = rng.normal(size=20)
    p_null = permutation_test(same, same.copy(), 1000, seed=1)
    p_sep = permutation_test(np.zeros(20), np.full(20, 10.0), 1000, seed=1)
    ok = eq_exact and uneq_err <= 1e-9 and holm and p_null >= 0.5 and p_sep <= 0.01
    record_acceptance(7, "attribution oracles", ok,
                      f"(W1 equal-size exact={eq_exact}, unequal err={uneq_err:.1e}, Holm ok={holm}, "
                      f"p_null={p_null:.3f}, p_sep={p_sep:.4f})")
    assert ok


def test_c08_norm_existence_smoke():
    t0 = time.perf_counter()
    cat = default_catalog()
    ic = IC_PRESETS["IC1"]
    seeds = (1101, 1103, 1105, 1107)
    hits = {"GMV": 0, "FAI": 0}
    ni_any = 0
    for s in seeds:
        gmv = compute_outcomes(run_episode(ic, DEFAULT_REGIMES["GMV"], s), cat)
        fai = compute_outcomes(run_episode(ic, DEFAULT_REGIMES["FAI"], s), cat)
        ni = compute_outcomes(run_episode(ic, DEFAULT_REGIMES["NI"], s), cat)
        hits["GMV"] += gmv["ST-1"].all_attained()
        hits["FAI"] += fai["RI-1"].all_attained()
        ni_any += ni["ST-1"].all_attained() or ni["RI-1"].all_attained()
    secs = time.perf_counter() - t0
    ok = hits["GMV"] >= 3 and hits["FAI"] >= 3 and ni_any == 0 and secs < 120
    record_acceptance(8, "norm existence smoke test on IC1", ok,
                      f"(GMV ST-1 {hits['GMV']}/4, FAI RI-1 {hits['FAI']}/4, NI attains on {ni_any}/4, {secs:.1f}s)")
    assert ok


def test_c09_ergodic_sanity():
    chain = TwoStateChain(0.3, 0.2)
    stat = np.array([0.0, 1.0])
    target = chain.expectation(stat)
    errs = [abs(chain.time_average(stat, 100_000, seed) - target) for seed in range(10)]
    ok = all(e <= 0.01 for e in errs)
    record_acceptance(9, "two-state chain time average", ok,
                      f"(stationary mean={target:.3f}, max err={max(errs):.4f}, {sum(e <= 0.01 for e in errs)}/10)")
    assert ok


def test_c10_coverage_dominates_pns(pipeline_run):
    from icr.baselines import METHODS
    from icr.router import load_routers

    tabs = pipeline_run.tables()
    checked, bad = 0, []
    for m in METHODS:
        rp, _ = pipeline_run.stage2(m)
        for router in load_routers(rp):
            for split in ("train", "test"):
                t = evaluate_router(router, tabs[split], split)
                checked += 1
                if (t.event & ~t.treat_ok).any() or coverage(t) < pns_target(t):
                    bad.append((m, router.task, split))
    ok = not bad and checked == len(METHODS) * 20 * 2
    record_acceptance(10, "coverage dominates PNS on every router and split", ok,
                      f"({checked - len(bad)}/{checked} router-splits)")
    assert ok, bad
