import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import build_lp, build_milp, exhaustive_binary, knapsack, random_lp, vertex_enumeration
from restoration_attack.errors import MalformedProblem, NodeLimitReached
from restoration_attack.lp import LpProblem, MilpProblem, dump_problem, solve_lp, solve_milp


def test_single_variable_max():
    prob = LpProblem("max")
    x = prob.add_var("x", 0)
    prob.add_constraint({x: 1}, "<=", 5)
    prob.set_objective({x: 1})
    out = solve_lp(prob)
    assert out.optimal
    assert out.value(prob, "x") == pytest.approx(5.0)
    assert out.objective == pytest.approx(5.0)


def test_contradictory_rows_are_infeasible():
    prob = LpProblem()
    x = prob.add_var("x", -math.inf, math.inf)
    prob.add_constraint({x: 1}, ">=", 1, name="low")
    prob.add_constraint({x: 1}, "<=", 0, name="high")
    out = solve_lp(prob)
    assert out.status == "infeasible"


def test_unbounded_is_reported():
    prob = LpProblem("max")
    x = prob.add_var("x", 0)
    prob.set_objective({x: 1})
    assert solve_lp(prob).status == "unbounded"


def test_equality_and_free_variables():
    prob = LpProblem("min")
    x = prob.add_var("x", -math.inf, math.inf)
    y = prob.add_var("y", -math.inf, math.inf)
    prob.add_constraint({x: 1, y: 1}, "=", 3)
    prob.add_constraint({x: 1, y: -1}, ">=", -1)
    prob.set_objective({x: 2, y: 1})
    out = solve_lp(prob)
    # y = 3 - x, x - y >= -1 -> x >= 1; objective x + 3 -> x = 1
    assert out.value(prob, "x") == pytest.approx(1.0)
    assert out.objective == pytest.approx(4.0)


@pytest.mark.parametrize("seed", range(200))
def testrandom_lp_matches_vertex_enumeration(seed):
    c, A, b, lo, hi = random_lp(np.random.default_rng(seed))
    prob = build_lp(c, A, b, lo, hi)
    out = solve_lp(prob)
    status, value = vertex_enumeration(c, A, b, lo, hi)
    assert out.status == status
    assert out.objective == pytest.approx(value, abs=1e-6)
    assert prob.max_violation(out.values) <= 1e-7


def test_embedded_and_highs_agree():
    c, A, b, lo, hi = random_lp(np.random.default_rng(99), n=12, m=20)
    prob = build_lp(c, A, b, lo, hi)
    a = solve_lp(prob, backend="embedded")
    h = solve_lp(prob, backend="highs")
    assert a.objective == pytest.approx(h.objective, abs=1e-7)


def test_binary_pair():
    prob = MilpProblem("max")
    x = prob.add_var("x", binary=True)
    y = prob.add_var("y", binary=True)
    prob.set_objective({x: 3, y: 2})
    prob.add_constraint({x: 1, y: 1}, "<=", 1)
    out = solve_milp(prob)
    assert (out.value(prob, "x"), out.value(prob, "y")) == (1.0, 0.0)
    assert out.objective == pytest.approx(3.0)


def test_fixed_binaries_reduce_to_lp():
    prob = MilpProblem("max")
    x = prob.add_var("x", 1, 1, binary=True)
    y = prob.add_var("y", 0, 10)
    prob.add_constraint({x: 4, y: 1}, "<=", 7)
    prob.set_objective({x: 1, y: 1})
    assert solve_milp(prob).objective == pytest.approx(solve_lp(prob).objective)
    assert solve_milp(prob).nodes == 1


@pytest.mark.parametrize("seed", range(20))
def test_knapsack_matches_exhaustive(seed):
    c, A, b = knapsack(seed)
    prob = build_milp(c, A, b)
    out = solve_milp(prob)
    assert out.objective == pytest.approx(exhaustive_binary(c, A, b), abs=1e-9)
    assert set(np.round(out.values, 12)) <= {0.0, 1.0}


def test_node_limit_returns_incumbent_or_raises():
    c, A, b = knapsack(3, n=14)
    prob = build_milp(c, A, b)
    out = solve_milp(prob, node_limit=2)
    assert out.node_limit_reached
    with pytest.raises(NodeLimitReached):
        solve_milp(prob, node_limit=2, raise_on_limit=True)


def test_malformed_problems():
    prob = LpProblem()
    prob.add_var("x")
    with pytest.raises(MalformedProblem):
        prob.add_var("x")
    with pytest.raises(MalformedProblem):
        prob.add_var("y", 2, 1)
    with pytest.raises(MalformedProblem):
        prob.add_constraint({"missing": 1}, "<=", 1)
    with pytest.raises(MalformedProblem):
        prob.add_constraint({"x": 1}, "<", 1)
    with pytest.raises(MalformedProblem):
        LpProblem().add_var("b", binary=True)


def test_dump_problem_lists_every_element():
    prob = MilpProblem("max")
    x = prob.add_var("x", binary=True)
    y = prob.add_var("y", 0, 4)
    prob.set_objective({x: 1, y: 0.5})
    prob.add_constraint({x: 2, y: 1}, "<=", 3, name="cap")
    text = dump_problem(prob)
    assert text.splitlines() == [
        "sense max",
        "objective +1*x +0.5*y",
        "bin x 0 1",
        "var y 0 4",
        "con cap +2*x +1*y <= 3",
    ]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_optimal_solutions_are_feasible(seed):
    c, A, b, lo, hi = random_lp(np.random.default_rng(seed), n=4, m=6)
    prob = build_lp(c, A, b, lo, hi)
    out = solve_lp(prob)
    assert out.optimal
    assert prob.max_violation(out.values) <= 1e-7
    # no feasible corner of the box beats the optimum
    for corner in (lo, hi):
        if np.all(A @ corner <= b):
            assert out.objective <= c @ corner + 1e-9
