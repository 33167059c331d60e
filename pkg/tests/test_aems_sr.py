"""Anytime graph search planner: expansion, propagation, selection, decisions."""

import time

import numpy as np
import pytest

import oracles
from pomdp_sr import aems_sr, bounds, envs
from pomdp_sr.aems_sr import (AlreadyExpanded, SearchGraph, SingularSystem,
                              plan_step, solve_psi)
from pomdp_sr.bounds import AlphaVectorSet, BoundKind
from pomdp_sr.model import Belief, Phase, PomdpModel, PomdpSr


GAMMA = 0.95


def counterexample(c=0.1):
    return envs.fib_counterexample(c)


def standard_setup(c=0.1, b=(0.5, 0.5)):
    prob = counterexample(c)
    up = bounds.qmdp(prob)
    lo = bounds.blind_lower_bound(prob.model)
    root = Belief([0, 1], b)
    return prob, lo, up, root


def fresh_graph(c=0.1, b=(0.5, 0.5), **kw):
    prob, lo, up, root = standard_setup(c, b)
    return SearchGraph(prob, lo, up, root, **kw)


def swap_chain_problem():
    """Deterministic two-state swap with a single action and blank signal.

    Beliefs stay point masses forever, so the exact value is linear:
    V(s) = (r_s + g * r_other) / (1 - g^2).
    """
    T = np.zeros((2, 1, 2))
    T[0, 0, 1] = 1.0
    T[1, 0, 0] = 1.0
    Z = np.ones((2, 1, 1))
    R = np.array([[2.0], [-1.0]])
    model = PomdpModel.from_dense(T, Z, R, 0.9)
    return PomdpSr(model, 0.05)


def loose_box_bounds(num_states, lo=-50.0, hi=50.0):
    up = AlphaVectorSet(BoundKind.UPPER, np.full((1, num_states), hi), (0,))
    dn = AlphaVectorSet(BoundKind.LOWER, np.full((1, num_states), lo), (0,))
    return dn, up


# -- construction ------------------------------------------------------------


def test_rejects_mismatched_inputs():
    prob, lo, up, root = standard_setup()
    with pytest.raises(ValueError):
        SearchGraph(prob, up, lo, root)
    with pytest.raises(ValueError):
        SearchGraph(prob, lo, up, Belief([0, 1], [0.5, 0.5], Phase.ENV_ACTION))
    with pytest.raises(TypeError):
        SearchGraph(prob.model, lo, up, root)
    other_lo, other_up = loose_box_bounds(3)
    with pytest.raises(ValueError):
        SearchGraph(prob, other_lo, up, root)


def test_root_starts_as_offline_fringe():
    g = fresh_graph()
    assert g.node_count == 1
    assert g.is_fringe(0) and g.phase_of(0) == 0
    lo, hi = g.root_bounds()
    assert lo == pytest.approx(g.lower_set.evaluate(g.belief_of(0)))
    assert hi == pytest.approx(g.upper_set.evaluate(g.belief_of(0)))


# -- expansion ---------------------------------------------------------------


def test_first_expansion_structure():
    g = fresh_graph()
    g.expand(0)
    # 2 corners and a twin, each with one fringe child per (action, obs)
    assert g.node_count == 10
    groups = g.children_of(0)
    assert [a for a, _, _, _ in groups] == [-2, -1]
    req, noreq = groups
    assert req[1] == pytest.approx(-0.1) and req[2] == 1.0
    assert noreq[1] == 0.0 and noreq[2] == 1.0
    assert [p for _, p in req[3]] == [0.5, 0.5]
    assert [p for _, p in noreq[3]] == [1.0]
    c0, c1 = g.corner_node(0), g.corner_node(1)
    assert {n for n, _ in req[3]} == {c0, c1}
    assert g.corner_state_of(c0) == 0 and g.belief_of(c0).is_corner()
    assert g.phase_of(c0) == 1 and not g.is_fringe(c0)
    twin = noreq[3][0][0]
    assert g.phase_of(twin) == 1
    assert g.belief_of(twin).states == g.belief_of(0).states
    assert g.belief_of(twin).probs == g.belief_of(0).probs
    for n in (c0, c1, twin):
        env = g.children_of(n)
        assert [a for a, _, _, _ in env] == [0, 1]
        for _, _, disc, branches in env:
            assert disc == pytest.approx(GAMMA)
            assert len(branches) == 1 and branches[0][1] == pytest.approx(1.0)
            assert g.is_fringe(branches[0][0])


def test_expand_rejects_non_fringe():
    g = fresh_graph()
    g.expand(0)
    with pytest.raises(AlreadyExpanded):
        g.expand(0)
    with pytest.raises(AlreadyExpanded):
        g.expand(g.corner_node(0))  # corners are born expanded
    with pytest.raises(IndexError):
        g.expand(g.node_count)


def test_backed_up_bounds_after_one_expansion():
    # one synchronous backup from offline leaf values, by hand
    prob, lo, up, root = standard_setup()
    g = SearchGraph(prob, lo, up, root)
    g.expand(0)
    g.update_ancestors(0)
    uniform = Belief([0, 1], [0.5, 0.5], Phase.REQUEST_DECISION)

    def env_backup(alpha, belief):
        best = -np.inf
        for a in range(2):
            r = sum(p * prob.model.reward(s, a)
                    for s, p in zip(belief.states, belief.probs))
            best = max(best, r + GAMMA * alpha.evaluate(uniform))
        return best

    cu = [env_backup(up, Belief([s], [1.0])) for s in (0, 1)]
    cl = [env_backup(lo, Belief([s], [1.0])) for s in (0, 1)]
    tu, tl = env_backup(up, uniform), env_backup(lo, uniform)
    want_u = max(-0.1 + 0.5 * (cu[0] + cu[1]), tu)
    want_l = max(-0.1 + 0.5 * (cl[0] + cl[1]), tl)
    got_l, got_u = g.root_bounds()
    assert got_u == pytest.approx(want_u, abs=1e-9)
    assert got_l == pytest.approx(want_l, abs=1e-9)
    # request should be the upper-greedy choice here
    assert g.greedy_action_of(0) == -2


def test_bounds_stay_sandwiched_and_inside_offline_box():
    rng = np.random.default_rng(3)
    prob = envs.random_pomdp_sr(rng, 5, 3, 3, 0.9, cost_range=(0.05, 0.2))
    up = bounds.qmdp(prob)
    lo = bounds.blind_lower_bound(prob.model)
    root = Belief(np.arange(5), np.full(5, 0.2))
    g = SearchGraph(prob, lo, up, root)
    g.plan(budget=150, epsilon=1e-4)
    for n in range(g.node_count):
        l, u = g.bounds_of(n)
        ol, ou = g.offline_bounds_of(n)
        assert l <= u + 1e-9
        assert l >= ol - 1e-9 and u <= ou + 1e-9
        if g.is_fringe(n):
            assert (l, u) == (ol, ou)


# -- propagation -------------------------------------------------------------


def test_chain_converges_to_closed_form():
    prob = swap_chain_problem()
    lo, up = loose_box_bounds(2)
    root = Belief([0], [1.0])
    g = SearchGraph(prob, lo, up, root)
    stats = g.plan(budget=600, epsilon=1e-4)
    v0 = (2.0 + 0.9 * -1.0) / (1.0 - 0.81)
    assert stats.status == "solved"
    l, u = g.root_bounds()
    assert l - 1e-9 <= u
    assert abs(u - v0) <= 2e-4
    assert abs(l - v0) <= 2e-4
    d = g.decide(stats)
    assert d.request is False and d.action == 0


def test_update_ancestors_requires_valid_node():
    g = fresh_graph()
    with pytest.raises(IndexError):
        g.update_ancestors(5)


# -- request-mass system ------------------------------------------------------


def test_psi_after_root_expansion():
    g = fresh_graph(b=(0.3, 0.7))
    g.expand(0)
    g.update_ancestors(0)
    assert g.greedy_action_of(0) == -2
    sol = g.psi_solution()
    np.testing.assert_allclose(sol.psi_bar_root, [0.3, 0.7])
    np.testing.assert_allclose(sol.psi_bar, 0.0)
    np.testing.assert_allclose(sol.psi_root, [0.3, 0.7])
    # each corner's greedy env child contributes mass * gamma * offline gap
    for f, score in sol.fringe_scores.items():
        assert g.is_fringe(f)
        ol, ou = g.offline_bounds_of(f)
        origin = g.origin_of(f)
        assert origin in (0, 1)
        want = sol.psi_root[origin] * GAMMA * (ou - ol)
        assert score == pytest.approx(want, rel=1e-12)


def test_corner_cycle_masses_match_linear_solve():
    # tiny cost keeps the request edge upper-greedy at uniform beliefs, so
    # expanding both corners' children closes the greedy subgraph into a cycle
    g = fresh_graph(c=0.001)
    g.expand(0)
    g.update_ancestors(0)
    for corner in (g.corner_node(0), g.corner_node(1)):
        for action, _, _, branches in g.children_of(corner):
            assert action >= 0
            for child, _ in branches:
                if g.is_fringe(child):
                    g.expand(child)
                    g.update_ancestors(child)
    sol = g.psi_solution()
    np.testing.assert_allclose(sol.psi_bar, GAMMA * 0.5, atol=1e-12)
    np.testing.assert_allclose(sol.psi_bar_root, 0.5, atol=1e-12)
    direct = np.linalg.solve(np.eye(2) - sol.psi_bar.T, sol.psi_bar_root)
    np.testing.assert_allclose(sol.psi_root, direct, atol=1e-10)
    series = oracles.neumann_series_solve(sol.psi_bar.T, sol.psi_bar_root,
                                          terms=2000)
    np.testing.assert_allclose(sol.psi_root, series, atol=1e-8)
    # total discounted corner visits of the request-forever loop: 1/(1-gamma)
    assert sol.psi_root.sum() == pytest.approx(1.0 / (1.0 - GAMMA), rel=1e-9)
    assert sol.fringe_scores == {}


def test_fallback_selection_when_greedy_subgraph_closes():
    g = fresh_graph(c=0.001)
    g.expand(0)
    g.update_ancestors(0)
    for corner in (g.corner_node(0), g.corner_node(1)):
        for _, _, _, branches in g.children_of(corner):
            for child, _ in branches:
                if g.is_fringe(child):
                    g.expand(child)
                    g.update_ancestors(child)
    assert g.psi_solution().fringe_scores == {}
    picked = g.get_belief_to_expand()
    assert g.is_fringe(picked) and g.phase_of(picked) == 0
    stats = g.plan(budget=3, epsilon=1e-8)
    assert stats.fallbacks == 3


def test_solve_psi_units():
    rhs = np.array([0.3])
    np.testing.assert_allclose(solve_psi(np.zeros((1, 1)), rhs), rhs)
    np.testing.assert_allclose(solve_psi(np.array([[0.5]]), rhs), [0.6])
    with pytest.raises(SingularSystem):
        solve_psi(np.eye(2), np.ones(2))
    rng = np.random.default_rng(11)
    psi = rng.uniform(0, 1, (5, 5))
    psi *= 0.9 / psi.sum(axis=1, keepdims=True)  # substochastic rows
    rhs = rng.uniform(0, 1, 5)
    x = solve_psi(psi, rhs)
    series = oracles.neumann_series_solve(psi.T, rhs, terms=1000)
    np.testing.assert_allclose(x, series, atol=1e-8)


# -- selection ---------------------------------------------------------------


def test_selection_matches_reference_argmax():
    for seed in (0, 4, 9):
        rng = np.random.default_rng(seed)
        ns = int(rng.integers(3, 6))
        prob = envs.random_pomdp_sr(rng, ns, 2, 2, 0.9, cost_range=(0.05, 0.3))
        up = bounds.qmdp(prob)
        lo = bounds.blind_lower_bound(prob.model)
        root = Belief(np.arange(ns), rng.dirichlet(np.ones(ns)))
        g = SearchGraph(prob, lo, up, root)
        for _ in range(25):
            picked = g.get_belief_to_expand()
            assert g.is_fringe(picked) and g.phase_of(picked) == 0
            if not g.is_fringe(0):
                sol = g.psi_solution()
                if sol.fringe_scores:
                    scores = list(sol.fringe_scores.values())
                    best = max(scores)
                    ties = [f for f, sc in sol.fringe_scores.items()
                            if sc >= best - 1e-12 * max(1.0, abs(best))]
                    assert picked in ties
            g.expand(picked)
            g.update_ancestors(picked)


def test_candidate_scores_bounded_by_discounted_gap():
    prob = envs.robot_delivery(3)
    up = bounds.fib_sr(prob)
    lo = bounds.blind_lower_bound(prob.model)
    g = SearchGraph(prob, lo, up, envs.robot_delivery_initial_belief(3))
    g.plan(budget=200, epsilon=1e-4)
    # env-edge depth of every node by breadth-first scan over all groups
    depth = {0: 0}
    frontier = [0]
    while frontier:
        nxt = []
        for n in frontier:
            if g.is_fringe(n):
                continue
            for action, _, _, branches in g.children_of(n):
                for child, _ in branches:
                    d = depth[n] + (1 if action >= 0 else 0)
                    if child not in depth or d < depth[child]:
                        depth[child] = d
                        nxt.append(child)
        frontier = nxt
    max_gap = max(g.offline_bounds_of(f)[1] - g.offline_bounds_of(f)[0]
                  for f in g.fringe_nodes())
    sol = g.psi_solution()
    assert sol.fringe_scores
    for f, score in sol.fringe_scores.items():
        assert score <= prob.model.discount ** depth[f] * max_gap + 1e-9


# -- planning loop -------------------------------------------------------------


def test_plan_counterexample_requests_state():
    g = fresh_graph()
    stats = g.plan(budget=200, epsilon=1e-3)
    assert stats.status == "solved"
    assert stats.expansions <= 50
    l, u = g.root_bounds()
    assert abs(l - 18.0) <= 1e-3
    assert l - 1e-9 <= 18.0 <= u + 1e-9
    d = g.decide(stats)
    assert d.request is True
    assert d.state_action == {0: 0, 1: 1}
    assert d.action is None


def test_plan_zero_budget_offline_decision():
    g = fresh_graph()
    stats = g.plan(budget=0, epsilon=1e-3)
    assert stats.expansions == 0 and g.node_count == 1
    d = g.decide(stats)
    assert d.request is True and d.state_action == {0: 0, 1: 1}
    # an epsilon wider than the offline gap is satisfied immediately
    g2 = fresh_graph()
    stats2 = g2.plan(budget=100, epsilon=1e6)
    assert stats2.status == "solved" and stats2.expansions == 0


def test_trace_rows_and_monotone_root_bounds():
    prob = envs.robot_delivery(3)
    up = bounds.fib_sr(prob)
    lo = bounds.blind_lower_bound(prob.model)
    g = SearchGraph(prob, lo, up, envs.robot_delivery_initial_belief(3))
    stats = g.plan(budget=300, epsilon=1e-4, trace=True)
    assert stats.trace is not None and len(stats.trace) == stats.expansions
    last_u, last_l, last_n = np.inf, -np.inf, 0
    for i, row in enumerate(stats.trace):
        assert row["iteration"] == i
        assert row["score"] > 0.0
        assert row["root_upper"] <= last_u + 1e-9
        assert row["root_lower"] >= last_l - 1e-9
        assert row["node_count"] > last_n
        last_u, last_l = row["root_upper"], row["root_lower"]
        last_n = row["node_count"]
        assert row["origin"] == "ROOT" or isinstance(row["origin"], int)


def test_plan_is_deterministic():
    def run():
        g = fresh_graph(c=0.3)
        stats = g.plan(budget=120, epsilon=1e-5, trace=True)
        d = g.decide(stats)
        return stats, d, g.node_count

    s1, d1, n1 = run()
    s2, d2, n2 = run()
    assert n1 == n2
    assert (s1.root_upper, s1.root_lower) == (s2.root_upper, s2.root_lower)
    assert d1.request == d2.request and d1.state_action == d2.state_action
    for r1, r2 in zip(s1.trace, s2.trace):
        assert r1 == r2


def test_budget_split_resumes_cleanly():
    # planning 40 then 80 more lands exactly where a single 120 run does
    g1 = fresh_graph(c=0.3)
    g1.plan(budget=40, epsilon=1e-6)
    s1 = g1.plan(budget=80, epsilon=1e-6)
    g2 = fresh_graph(c=0.3)
    s2 = g2.plan(budget=120, epsilon=1e-6)
    assert g1.node_count == g2.node_count
    assert g1.root_bounds() == g2.root_bounds()
    assert s1.expansions + 40 == s2.expansions


# -- planner variants -----------------------------------------------------------


def test_request_masked_mode_never_requests():
    g = fresh_graph(allow_request=False)
    stats = g.plan(budget=150, epsilon=1e-4)
    assert [a for a, _, _, _ in g.children_of(0)] == [-1]
    assert g.corner_node(0) is None and g.corner_node(1) is None
    d = g.decide(stats)
    assert d.request is False and d.action in (0, 1)
    # without requests the uniform belief is worth nothing here
    assert g.root_bounds()[0] == pytest.approx(0.0, abs=1e-6)


def test_tree_mode_duplicates_corners():
    g = fresh_graph(use_registry=False)
    g.plan(budget=60, epsilon=1e-5)
    assert g.corner_node(0) is None
    corner_lo, corner_up = g.corner_action_values()
    assert corner_lo.entries == {} and corner_up.entries == {}
    # same planning problem with sharing needs no more nodes
    g2 = fresh_graph(use_registry=True)
    g2.plan(budget=60, epsilon=1e-5)
    assert g2.node_count <= g.node_count


def test_corner_action_values_cover_registry():
    g = fresh_graph()
    g.plan(budget=100, epsilon=1e-4)
    corner_lo, corner_up = g.corner_action_values()
    assert corner_lo.kind is BoundKind.LOWER
    assert corner_up.kind is BoundKind.UPPER
    assert set(corner_lo.entries) == {(s, a) for s in (0, 1) for a in (0, 1)}
    # at state 0 the matching action 0 beats action 1 in lower value
    assert corner_lo.entries[(0, 0)] > corner_lo.entries[(0, 1)]
    for key, q in corner_up.entries.items():
        assert corner_lo.entries[key] <= q + 1e-9


# -- decisions -------------------------------------------------------------------


def test_state_action_tie_breaks_to_lowest_action():
    # duplicate the optimal action: states tie between ids 0 and 1
    T = np.full((2, 3, 2), 0.5)
    Z = np.ones((2, 3, 1))
    R = np.array([[1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    prob = PomdpSr(PomdpModel.from_dense(T, Z, R, GAMMA), 0.1)
    up = bounds.qmdp(prob)
    lo = bounds.blind_lower_bound(prob.model)
    g = SearchGraph(prob, lo, up, Belief([0, 1], [0.5, 0.5]))
    stats = g.plan(budget=200, epsilon=1e-3)
    d = g.decide(stats)
    assert d.request is True
    assert d.state_action == {0: 0, 1: 2}


def test_plan_step_wrapper_roundtrip():
    prob, lo, up, root = standard_setup()
    d = plan_step(prob, lo, up, root, budget=100, epsilon=1e-3)
    assert d.request is True and d.state_action == {0: 0, 1: 1}
    assert d.stats.status == "solved"
    assert d.graph is not None and d.graph.expansion_count == d.stats.expansions


# -- throughput ------------------------------------------------------------------


def test_planning_throughput_on_delivery():
    prob = envs.robot_delivery(3)
    up = bounds.fib_sr(prob)
    lo = bounds.blind_lower_bound(prob.model)
    b0 = envs.robot_delivery_initial_belief(3)
    SearchGraph(prob, lo, up, b0).plan(budget=50, epsilon=1e-3)  # warm the jit
    g = SearchGraph(prob, lo, up, b0)
    t0 = time.perf_counter()
    stats = g.plan(budget=2473, epsilon=1e-3)
    elapsed = time.perf_counter() - t0
    assert stats.expansions == 2473
    assert elapsed < 3.0
