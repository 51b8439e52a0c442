import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from hacs.detect import Access
from hacs.errors import DomainError, InsufficientHistory
from hacs.scheduler import (
    BRUTE_FORCE,
    LAST_OBS,
    THETA_GRID,
    Candidate,
    PredictionInput,
    brute_force_plan,
    f_estimate,
    g_probability,
    hacs_plan,
    last_obs_plan,
    random_plan,
    schedule_brute_force,
    schedule_hacs,
    schedule_last_obs,
    schedule_random,
)


def inp(key, times, link_sets, t, w=4):
    return PredictionInput(key, tuple(Access(float(x), frozenset(s)) for x, s in zip(times, link_sets)), w, t)


def cands(ps, taus=None):
    taus = taus or [0.0] * len(ps)
    return [Candidate(f"u{i}", 0.1, tau, p) for i, (p, tau) in enumerate(zip(ps, taus))]


class TestF:
    def test_two_access_example(self):
        # one interpolated update at day 1 over a 2-day span
        lam, tau = f_estimate(inp("a", [0, 2], [{"x"}, {"x", "y"}], t=2))
        assert lam == pytest.approx(0.5, rel=1e-12) and tau == 1.0

    def test_rate_is_updates_over_span(self):
        times = [0, 1, 2, 3, 4, 5]
        sets = [{"a"}, {"a"}, {"a", "b"}, {"a", "b"}, {"a", "b", "c"}, {"a", "b", "c"}]
        lam, tau = f_estimate(inp("a", times, sets, t=6))
        assert lam == pytest.approx(2 / 5) and tau == 3.5

    def test_zero_updates(self):
        assert f_estimate(inp("a", [1, 5], [{"x"}, {"x"}], t=5)) == (0.0, 1.0)

    def test_shift_invariance(self):
        a = f_estimate(inp("a", [0, 2, 5], [{"x"}, {"x", "y"}, {"x", "y"}], t=6))
        b = f_estimate(inp("a", [0, 2, 5], [{"x"}, {"x", "y"}, {"x", "y"}], t=7.5))
        assert a == b

    def test_insufficient(self):
        with pytest.raises(InsufficientHistory):
            f_estimate(inp("a", [1], [{"x"}], t=2))

    def test_window_enforced(self):
        with pytest.raises(DomainError):
            inp("a", [0, 10], [set(), set()], t=10, w=1)

    def test_from_history(self):
        hist = [Access(float(x), frozenset()) for x in range(20)]
        p = PredictionInput.from_history("a", hist, w=1, t=15)
        assert [a.time for a in p.accesses] == [8.0 + i for i in range(8)]


class TestG:
    def test_trivial(self):
        assert g_probability(0.0, 0.0, 1e6, 7) == 0.0
        assert g_probability(0.3, 5.0, 5.0, 0.0) == 0.0

    def test_value(self):
        expected = float(1 - mpmath.exp(-1))
        assert g_probability(1 / 35, 0.0, 28.0, 7.0) == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(0.632120, abs=1e-6)

    def test_domain(self):
        with pytest.raises(DomainError):
            g_probability(0.1, 10.0, 9.0)
        with pytest.raises(DomainError):
            g_probability(0.1, 0.0, 1.0, -1.0)

    @given(st.floats(1e-3, 1), st.floats(0.1, 50), st.floats(0.1, 20), st.floats(1e-3, 1))
    def test_strictly_increasing(self, lam, dt, e, bump):
        # keep 1 - p resolvable in double precision
        assume((lam + bump) * (dt + e + bump) < 30)
        base = g_probability(lam, 0.0, dt, e)
        assert g_probability(lam + bump, 0.0, dt, e) > base
        assert g_probability(lam, 0.0, dt + bump, e) > base
        assert g_probability(lam, 0.0, dt, e + bump) > base


class TestPlans:
    def test_threshold_example(self):
        plan = hacs_plan(cands([0.1, 0.9, 0.5]), 0.6, t=10)
        assert plan.selected == ["u1"]
        assert plan.ranking == ["u1", "u2", "u0"]
        assert [e.rank for e in plan.entries] == [1, 2, 3]

    def test_theta_extremes(self):
        c = cands([0.0, 0.3, 0.99])
        assert len(hacs_plan(c, 0.0, t=1).selected) == 3
        assert hacs_plan(c, 1.0, t=1).selected == []

    def test_tie_break_stalest_then_key(self):
        c = [Candidate("b", 0, 5.0, 0.0), Candidate("a", 0, 5.0, 0.0), Candidate("c", 0, 1.0, 0.0)]
        assert hacs_plan(c, 0.5, t=9).ranking == ["c", "a", "b"]

    @given(st.lists(st.floats(0, 0.999), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_theta(self, ps, t1, t2):
        lo, hi = sorted((t1, t2))
        c = cands(ps)
        assert set(hacs_plan(c, hi, t=1).selected) <= set(hacs_plan(c, lo, t=1).selected)

    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=15, unique=True))
    def test_rank_invariant_under_monotone_transform(self, ps):
        a = hacs_plan(cands(ps), 0.5, t=1).ranking
        b = hacs_plan(cands([p**3 for p in ps]), 0.5, t=1).ranking
        assert a == b

    def test_random_cardinality_and_seed(self):
        c = cands([0.1 * i for i in range(10)])
        a = random_plan(c, 0.55, np.random.default_rng(3), t=1)
        b = random_plan(c, 0.55, np.random.default_rng(3), t=1)
        assert len(a.selected) == 4 and a.to_jsonl() == b.to_jsonl()
        assert random_plan(c, 0.0, np.random.default_rng(9), t=1).selected.__len__() == 10

    def test_theta_zero_all_policies_agree(self):
        c = cands([0.2, 0.0, 0.7])
        sets = [
            set(hacs_plan(c, 0.0, t=1).selected),
            set(random_plan(c, 0.0, np.random.default_rng(0), t=1).selected),
            set(brute_force_plan(c, t=1).selected),
        ]
        assert sets[0] == sets[1] == sets[2] == {"u0", "u1", "u2"}

    def test_last_obs(self):
        c = [Candidate("x", 0.1, 90.0, 0.9), Candidate("y", 0.1, 0.0, 0.1), Candidate("z", 0.1, 50.0, 0.5)]
        plan = last_obs_plan(c, t=100)
        assert plan.ranking == ["y", "z", "x"]
        assert all(e.selected is None for e in plan.entries)
        assert plan.url_list() == "y\nz\nx\n"
        tied = last_obs_plan([Candidate("b", 0, 3.0, 0), Candidate("a", 0, 3.0, 0)], t=9)
        assert tied.ranking == ["a", "b"]
        assert last_obs_plan(c[:1], t=100).entries[0].rank == 1

    def test_brute_force(self):
        assert brute_force_plan([], t=1).entries == []
        c = cands([0.1, 0.2])
        assert brute_force_plan(c, t=1, theta=0.9).selected == brute_force_plan(c, t=1, theta=0.1).selected


class TestScheduleFromInputs:
    def inputs(self):
        return [
            inp("fast", [0, 1, 2, 3], [{"a"}, {"a", "b"}, {"a", "b", "c"}, {"a", "b", "c", "d"}], t=3),
            inp("slow", [0, 3], [{"a"}, {"a"}], t=3),
            inp("thin", [2], [{"a"}], t=3),
        ]

    def test_insufficient_excluded(self):
        plan = schedule_hacs(self.inputs(), 0.0)
        assert sorted(plan.selected) == ["fast", "slow"]
        assert plan.ranking == ["fast", "slow"]

    def test_all_policies(self):
        ins = self.inputs()
        assert schedule_brute_force(ins).policy == BRUTE_FORCE
        assert schedule_last_obs(ins).policy == LAST_OBS
        assert schedule_random(ins, 0.5, seed=1).to_jsonl() == schedule_random(ins, 0.5, seed=1).to_jsonl()

    def test_mixed_cells_rejected(self):
        with pytest.raises(ValueError):
            schedule_hacs([inp("a", [0, 1], [set(), set()], t=1), inp("b", [0, 1], [set(), set()], t=2)], 0.5)

    def test_serialization(self):
        plan = schedule_hacs(self.inputs(), 0.5)
        rows = [json.loads(line) for line in plan.to_jsonl().splitlines()]
        assert set(rows[0]) == {"site_key", "lam", "tau", "p", "selected", "rank", "policy", "t", "w", "theta"}
        assert plan.url_list() == "".join(k + "\n" for k in plan.selected)


def test_theta_grid():
    assert THETA_GRID[0] == 0.0 and THETA_GRID[-1] == 1.0 and len(THETA_GRID) == 21
