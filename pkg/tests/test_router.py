import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_table
from oracles import bucket_gain_oracle, router_J, tiny_instance

from icr.outcomes import OutcomeTable
from icr.pns import ALL
from icr.router import (
    MissingArmError,
    MissingPNSError,
    Router,
    RouterConfig,
    Rule,
    SplitOverlapError,
    _View,
    bucketize,
    coverage_terms,
    evaluate_router,
    evaluate_splits,
    learn_router,
    load_routers,
    new_coverage,
    objective_J,
    pns_scorer,
    route,
    save_routers,
)
from icr.simulator import Context

TASK = ("T0", "N")


def ctxs(ics):
    return [Context(ic, float(i), (1.0, 1.0, 1.0)) for i, ic in enumerate(ics)]


class TestBucketize:
    def test_five_ics(self):
        bs = bucketize(ctxs([f"IC{k}" for k in range(1, 6) for _ in range(4)]))
        assert len(bs.keys) == 5
        assert np.allclose(bs.weights, 0.2)

    def test_single_ic(self):
        bs = bucketize(ctxs(["IC1"] * 7))
        assert bs.weights.tolist() == [1.0]

    def test_empty(self):
        with pytest.raises(ValueError):
            bucketize([])

    @given(st.lists(st.sampled_from(["IC1", "IC2", "IC3"]), min_size=1, max_size=50), st.sampled_from(["ic", "wealth"]))
    def test_partition(self, ics, scheme):
        bs = bucketize(ctxs(ics), scheme)
        assert abs(bs.weights.sum() - 1.0) <= 1e-9
        assert (bs.weights >= 0).all()
        assert ((bs.labels >= 0) & (bs.labels < len(bs.keys))).all()


class TestNewCoverage:
    bucket = np.array([True, True, True, True, False])

    def test_full(self):
        assert new_coverage(self.bucket.copy(), self.bucket, np.zeros(5, bool)) == 1.0

    def test_shadowed(self):
        m = np.array([1, 1, 0, 0, 0], bool)
        assert new_coverage(m, self.bucket, m.copy()) == 0.0

    def test_half(self):
        m = np.array([1, 1, 1, 0, 1], bool)
        covered = np.array([1, 0, 0, 0, 0], bool)
        assert new_coverage(m, self.bucket, covered) == 0.5

    def test_empty_bucket(self):
        with pytest.raises(ValueError):
            new_coverage(np.ones(3, bool), np.zeros(3, bool), np.zeros(3, bool))


class TestObjective:
    labels = np.zeros(4, dtype=int)
    w = np.array([1.0])

    def test_substitution(self):
        r = Rule("a", "T1")
        J = objective_J([r], {r.rule_id: np.array([1, 1, 0, 0], bool)}, self.labels, self.w,
                        {r.rule_id: np.array([0.8])}, 0.1)
        assert J == pytest.approx(0.3)

    def test_empty(self):
        assert objective_J([], {}, self.labels, self.w, {}, 0.1) == 0.0

    def test_missing_gain(self):
        r = Rule("a", "T1")
        with pytest.raises(MissingPNSError):
            objective_J([r], {r.rule_id: np.ones(4, bool)}, self.labels, self.w, {}, 0.1)

    @settings(max_examples=100)
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_duplicate_costs_lambda_and_penalty_identity(self, seed, lam):
        table, rules = tiny_instance(np.random.default_rng(seed))
        bs = bucketize(table.contexts)
        labels = bs.assign(table.contexts)
        g = pns_scorer(rules, table, TASK, labels, len(bs.keys), RouterConfig())
        match = {r.rule_id: table.flags[r.psi] for r in rules}
        gain = {r.rule_id: g[i] for i, r in enumerate(rules)}
        J = objective_J(rules, match, labels, bs.weights, gain, lam)
        dup = rules + [rules[0]]
        assert objective_J(dup, match, labels, bs.weights, gain, lam) == pytest.approx(J - lam, abs=1e-12)
        raw = objective_J(rules, match, labels, bs.weights, gain, 0.0)
        assert J + lam * len(rules) == pytest.approx(raw, abs=1e-12)
        ref = router_J(list(range(len(rules))), [match[r.rule_id].tolist() for r in rules], labels.tolist(),
                       bs.weights.tolist(), g.tolist(), lam)
        assert J == pytest.approx(ref, abs=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_bucket_gain_matches_loop_oracle(seed):
    table, rules = tiny_instance(np.random.default_rng(seed))
    bs = bucketize(table.contexts)
    labels = bs.assign(table.contexts)
    g = pns_scorer(rules, table, TASK, labels, len(bs.keys), RouterConfig())
    for i, r in enumerate(rules):
        assert g[i] == pytest.approx(bucket_gain_oracle(r, table, "T0", "N", labels.tolist(), len(bs.keys)))


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_coverage_monotone_along_router(seed):
    table, rules = tiny_instance(np.random.default_rng(seed))
    bs = bucketize(table.contexts)
    labels = bs.assign(table.contexts)
    m = coverage_terms(np.array([table.flags[r.psi] for r in rules]), labels, len(bs.keys))
    covered = np.cumsum(m @ bs.weights)
    assert (np.diff(covered) >= -1e-12).all()
    assert covered[-1] <= 1.0 + 1e-12


def _two_bucket_tables():
    # bucket A: PA matches, 9/10 events; bucket B: PB matches, 10/10 events
    ics = ["A"] * 10 + ["B"] * 10
    flags = {"PA": [True] * 10 + [False] * 10, "PB": [False] * 10 + [True] * 10}
    bits = {"T0": [0] * 20, "T1": [1] * 9 + [0] + [1] * 10}
    return make_table(ics, flags, bits), make_table(ics, flags, bits, seed0=100)


class TestLearnRouter:
    def test_disjoint_full_coverage_adds_all(self):
        train, val = _two_bucket_tables()
        rules = [Rule("PA", "T1", ALL, "a"), Rule("PB", "T1", ALL, "b")]
        rt = learn_router(rules, train, val, bucketize(train.contexts), task=TASK)
        assert [r.provenance for r in rt.rules] == ["b", "a"]

    def test_equal_pns_orders_by_id(self):
        ics = ["A"] * 5 + ["B"] * 5
        flags = {"PA": [True] * 5 + [False] * 5, "PB": [False] * 5 + [True] * 5}
        train = make_table(ics, flags, {"T0": [0] * 10, "T1": [1] * 10})
        val = make_table(ics, flags, {"T0": [0] * 10, "T1": [1] * 10}, seed0=50)
        rules = [Rule("PB", "T1", ALL, "z"), Rule("PA", "T1", ALL, "y")]
        rt = learn_router(rules, train, val, bucketize(train.contexts), task=TASK)
        assert [r.provenance for r in rt.rules] == ["y", "z"]

    def test_nonpositive_score_gives_empty_router(self):
        train, val = _two_bucket_tables()
        rt = learn_router([Rule("PA", "T1")], train, val, bucketize(train.contexts), RouterConfig(lam=0.5),
                          task=TASK)
        assert rt.rules == [] and route(rt, {"PA": True}) == "T0"

    def test_prune_removes_rule_shadowed_on_validation(self):
        ics = ["A"] * 10
        bits = {"T0": [0] * 10, "T1": [1] * 10}
        train = make_table(ics, {"PA": [True] * 5 + [False] * 5, "PB": [False] * 5 + [True] * 5}, bits)
        val = make_table(ics, {"PA": [True] * 10, "PB": [False] * 5 + [True] * 5}, bits, seed0=100)
        rules = [Rule("PA", "T1", ALL, "a"), Rule("PB", "T1", ALL, "b")]
        bs = bucketize(train.contexts)
        assert len(learn_router(rules, train, val, bs, task=TASK, prune=False)) == 2
        assert [r.provenance for r in learn_router(rules, train, val, bs, task=TASK).rules] == ["a"]

    def test_respects_k_max(self):
        train, val = _two_bucket_tables()
        rules = [Rule("PA", "T1", ALL, "a"), Rule("PB", "T1", ALL, "b")]
        assert len(learn_router(rules, train, val, bucketize(train.contexts), RouterConfig(k_max=1), task=TASK)) == 1

    def test_overlapping_splits_rejected(self):
        train, _ = _two_bucket_tables()
        with pytest.raises(SplitOverlapError):
            learn_router([Rule("PA", "T1")], train, train, bucketize(train.contexts), task=TASK)

    @pytest.mark.parametrize("rule", ["insert", "marginal", "product"])
    def test_score_rules_agree_on_easy_instance(self, rule):
        train, val = _two_bucket_tables()
        rules = [Rule("PA", "T1", ALL, "a"), Rule("PB", "T1", ALL, "b")]
        rt = learn_router(rules, train, val, bucketize(train.contexts), RouterConfig(score_rule=rule), task=TASK)
        assert {r.provenance for r in rt.rules} == {"a", "b"}

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_prune_costs_at_most_tau_per_rule(self, seed):
        table, rules = tiny_instance(np.random.default_rng(seed))
        val = OutcomeTable(table.contexts, [s + 10_000 for s in table.seeds], table.flags, table.bits, table.groups)
        bs = bucketize(table.contexts)
        cfg = RouterConfig()
        full = learn_router(rules, table, val, bs, cfg, TASK, prune=False)
        pruned = learn_router(rules, table, val, bs, cfg, TASK, prune=True)
        labels = bs.assign(val.contexts)
        g = pns_scorer(rules, val, TASK, labels, len(bs.keys), cfg)
        ids = [r.rule_id for r in rules]
        view = _View.build(rules, val, labels, len(bs.keys))
        J = lambda rt: view.J([ids.index(r.rule_id) for r in rt.rules], g, bs.weights, cfg.lam)
        removed = len(full) - len(pruned)
        assert J(pruned) >= J(full) - cfg.tau_prune * removed - 1e-12


class TestRoute:
    rt = Router([Rule("a", "X"), Rule("b", "Y")], "BASE")

    def test_empty(self):
        assert route(Router([], "BASE"), {"a": True}) == "BASE"

    def test_first_match(self):
        assert route(self.rt, {"a": True, "b": True}) == "X"

    def test_no_match(self):
        assert route(self.rt, {}) == "BASE"

    def test_callable_context(self):
        assert route(self.rt, lambda psi: psi == "b") == "Y"

    @given(st.permutations(range(5)), st.sets(st.integers(0, 5)))
    def test_permuting_below_first_match(self, perm, holds):
        rules = [Rule(f"p{i}", f"T{i}") for i in range(6)]
        ctx = {f"p{i}": True for i in holds}
        first = next((i for i, r in enumerate(rules) if ctx.get(r.psi)), None)
        if first is None:
            return
        tail = rules[first + 1:]
        shuffled = rules[:first + 1] + [tail[i] for i in perm if i < len(tail)]
        assert route(Router(rules, "B"), ctx) == route(Router(shuffled, "B"), ctx)


class TestEvaluate:
    table = make_table(["A"] * 4, {"TRUE": [True] * 4, "P": [True, False, True, False]},
                       {"T0": [0, 1, 0, 1], "T1": [1, 1, 0, 0]})

    def test_constant_routing(self):
        t = evaluate_router(Router([Rule("TRUE", "T1")], "T0", "N"), self.table)
        assert t.treat_ok.tolist() == [True, True, False, False]
        assert t.routed == ["T1"] * 4

    def test_fallback_only(self):
        t = evaluate_router(Router([], "T0", "N"), self.table)
        assert t.treat_ok.tolist() == [False, True, False, True]
        assert not t.event.any()

    def test_rule_index(self):
        t = evaluate_router(Router([Rule("P", "T1")], "T0", "N"), self.table)
        assert t.rule_index.tolist() == [0, -1, 0, -1]

    def test_missing_arm(self):
        with pytest.raises(MissingArmError):
            evaluate_router(Router([Rule("TRUE", "T9")], "T0", "N"), self.table)

    def test_split_overlap(self):
        with pytest.raises(SplitOverlapError):
            evaluate_splits(Router([], "T0", "N"), {"train": self.table, "test": self.table})


def test_router_file_round_trip(tmp_path):
    a = Router([Rule("IC1&Wlo", "GMV", ("low",), "x"), Rule("TRUE", "FAI", ALL, "y")], "NI", "ST-1", "pns_greedy",
               [0.5, 0.25], [0.4, 0.125])
    b = Router([], "BAL", "RI-2", "random")
    save_routers([a, b], tmp_path / "r.csv")
    assert load_routers(tmp_path / "r.csv") == [a, b]
