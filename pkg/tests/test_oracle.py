import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from acrl.envs import R1, R2, TabularCmdp, monitoring_mdp3
from acrl.oracle import (
    InfeasibleCmdp,
    certify_primal_recovery_gap,
    certify_strong_duality,
    dual_function,
    dual_function_batch,
    lagrangian_value,
    product_grid,
    solve_cmdp_lp,
)
from acrl.policy import deterministic_policies, evaluate_policy
from acrl.simplex import linprog_max

# ---------------------------------------------------------------- simplex


def test_simplex_textbook_problem():
    r = linprog_max([3, 2], [[1, 1], [1, 0]], [4, 3])
    assert r.success
    np.testing.assert_allclose(r.x, [3, 1])
    assert r.objective == pytest.approx(11)
    np.testing.assert_allclose(r.duals_ub, [2, 1])


def test_simplex_equalities_unbounded_infeasible():
    r = linprog_max([1, 1], [[1, 1]], [1], [[1, -1]], [0.5])
    assert r.success and r.objective == pytest.approx(1.0)
    np.testing.assert_allclose(r.x, [0.75, 0.25])
    assert linprog_max([1, 0], [[-1, 1]], [1]).status == "unbounded"
    bad = linprog_max([1, 0], [[1, 0]], [-1])
    assert bad.status == "infeasible" and bad.infeasibility > 0


def test_simplex_degenerate_problem_terminates():
    # a classic cycling example for the largest-coefficient rule
    c = [10, -57, -9, -24]
    A = [[0.5, -5.5, -2.5, 9], [0.5, -1.5, -0.5, 1], [1, 0, 0, 0]]
    r = linprog_max(c, A, [0, 0, 1])
    assert r.success and r.objective == pytest.approx(1.0)


def vertex_optimum(c, A, b):
    """Brute force over all bases of ``A x <= b, x >= 0`` (tiny problems only)."""
    n = len(c)
    rows = np.vstack([A, -np.eye(n)])
    rhs = np.concatenate([b, np.zeros(n)])
    best = -np.inf
    for idx in itertools.combinations(range(len(rows)), n):
        M = rows[list(idx)]
        if abs(np.linalg.det(M)) < 1e-9:
            continue
        x = np.linalg.solve(M, rhs[list(idx)])
        if np.all(rows @ x <= rhs + 1e-9):
            best = max(best, float(np.dot(c, x)))
    return best


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(float, 3, elements=st.floats(-3, 3)),
    hnp.arrays(float, (3, 3), elements=st.floats(0.1, 3)),
    hnp.arrays(float, 3, elements=st.floats(0.5, 5)),
)
def test_simplex_matches_vertex_enumeration(c, A, b):
    # positive A and b make the problem feasible (x = 0) and bounded
    r = linprog_max(c, A, b)
    assert r.success
    assert np.all(A @ r.x <= b + 1e-9) and np.all(r.x >= -1e-12)
    assert r.objective == pytest.approx(vertex_optimum(c, A, b), abs=1e-8)
    # dual feasibility and zero duality gap
    assert np.all(r.duals_ub >= -1e-9)
    assert np.all(A.T @ r.duals_ub >= c - 1e-8)
    assert np.dot(b, r.duals_ub) == pytest.approx(r.objective, abs=1e-8)


# ---------------------------------------------------------------- CMDP oracle


@pytest.fixture(scope="module")
def mdp():
    return monitoring_mdp3()


def test_lp_optimum_and_occupation(mdp):
    sol = solve_cmdp_lp(mdp)
    assert sol.value == pytest.approx(1 / 3, abs=1e-9)
    np.testing.assert_allclose(sol.state_occupation, [1 / 3] * 3, atol=1e-9)
    np.testing.assert_allclose(sol.values(mdp), [1 / 3] * 3, atol=1e-9)
    assert sol.unvisited_states == ()
    # the induced stationary policy realises the LP values from the start state
    V = evaluate_policy(mdp, sol.policy)[:, mdp.initial]
    np.testing.assert_allclose(V, [1 / 3] * 3, atol=1e-9)


def test_unconstrained_optimum(mdp):
    sol = solve_cmdp_lp(mdp.with_thresholds([0.0, 0.0]))
    assert sol.value == pytest.approx(0.5, abs=1e-9)


def test_infeasible_thresholds_raise_with_certificate(mdp):
    with pytest.raises(InfeasibleCmdp) as exc:
        solve_cmdp_lp(mdp.with_thresholds([0.9, 0.9]))
    assert exc.value.infeasibility > 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.49), st.floats(0, 0.49))
def test_lp_value_is_best_feasible_mixture(c1, c2):
    # no deterministic policy beats the LP, and the LP value is a valid upper bound on any feasible one
    m = monitoring_mdp3([c1, c2])
    sol = solve_cmdp_lp(m)
    assert np.all(sol.values(m)[1:] >= np.array([c1, c2]) - 1e-9)
    for pol in deterministic_policies(m):
        V = evaluate_policy(m, pol)[:, m.initial]
        if np.all(V[1:] >= np.array([c1, c2]) - 1e-12):
            assert V[0] <= sol.value + 1e-9


def test_dual_function_examples(mdp):
    assert dual_function(mdp, [0.0, 0.0]) == pytest.approx(0.5)
    assert dual_function(mdp, [1.0, 1.0]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        dual_function(mdp, [-0.1, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 1))
def test_dual_function_convex_and_above_primal(a1, a2, b1, b2, t):
    mdp = monitoring_mdp3()
    x, y = np.array([a1, a2]), np.array([b1, b2])
    dx, dy, dm = dual_function_batch(mdp, [x, y, t * x + (1 - t) * y])
    assert dm <= t * dx + (1 - t) * dy + 1e-8
    assert min(dx, dy) >= 1 / 3 - 1e-9


def test_lagrangian_value_of_lp_policy(mdp):
    sol = solve_cmdp_lp(mdp)
    assert lagrangian_value(mdp, sol.policy, [1.0, 1.0]) == pytest.approx(1 / 3, abs=1e-9)


def test_product_grid():
    g = product_grid(0.0, 1.0, 0.5, 2)
    assert g.shape == (9, 2) and g.max() == 1.0


def test_strong_duality_certificate(mdp):
    probe = certify_strong_duality(mdp)
    assert abs(probe.gap) < 1e-6
    assert np.max(np.abs(probe.argmin - 1.0)) <= 0.01
    assert probe.weak_duality_violation == 0.0
    rows = list(probe.csv_rows())
    assert rows[0] == ["lambda_1", "lambda_2", "d_lambda"]


def test_primal_recovery_certificate(mdp):
    cert = certify_primal_recovery_gap(mdp)
    assert cert.inclusion_error < 1e-9
    assert cert.strict and cert.witness_violation > 0
    choice = cert.witness.probs.argmax(axis=1)
    # the witness never visits one of the constrained regions
    V = evaluate_policy(mdp, cert.witness)[:, mdp.initial]
    assert min(V[R1], V[R2]) < 1 / 3
    assert len(choice) == 3 and any("strict" in ln for ln in cert.lines())


def test_tabular_cmdp_from_scratch_lp():
    # two states, one constraint: stay in state 1 at least 40% of the time, objective rewards state 0
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    rewards = np.zeros((2, 2, 2))
    rewards[0, 0, :] = 1.0
    rewards[1, 1, :] = 1.0
    m = TabularCmdp(P, rewards, [0.4], ((0, 1), (0, 1)))
    sol = solve_cmdp_lp(m)
    assert sol.value == pytest.approx(0.6, abs=1e-9)
