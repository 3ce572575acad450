import numpy as np
import pytest
from hypothesis import given, strategies as st

from lp_debias.errors import AmbiguousZero, DomainError, RankDeficient
from lp_debias.lp import (INFEASIBLE, OPTIMAL, UNBOUNDED, LpSolution, StandardFormLP,
                          check_assumptions, null_space_basis, plug_in_2x2, solve_lp, zero_set)
from lp_debias.transport import FlowProblem, OtProblem, ot_to_lp, rebalance_to_lp


def test_ot_2x2_solution(ot2x2):
    sol = solve_lp(ot2x2)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [0.5, 0, 0, 0.5], atol=1e-12)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def test_zero_cost_accepts_any_vertex():
    lp = StandardFormLP(np.array([[1.0, 1.0, 1.0]]), np.array([2.0]), np.zeros(3))
    sol = solve_lp(lp)
    assert sol.status == OPTIMAL and sol.objective == 0.0
    assert np.all(sol.x >= 0) and sol.x.sum() == pytest.approx(2.0)


def test_rebalance_two_stations():
    lp = rebalance_to_lp(FlowProblem(np.array([3.0, -3.0]), np.ones((2, 2)) - np.eye(2)))
    sol = solve_lp(lp)
    np.testing.assert_allclose(sol.x, [3.0, 0.0], atol=1e-12)
    assert sol.objective == pytest.approx(3.0)


def test_infeasible_and_unbounded():
    lp = StandardFormLP(np.array([[1.0, 1.0]]), np.array([-1.0]), np.array([1.0, 1.0]))
    assert solve_lp(lp).status == INFEASIBLE
    lp = StandardFormLP(np.array([[1.0, -1.0]]), np.array([0.0]), np.array([-1.0, 0.0]))
    assert solve_lp(lp).status == UNBOUNDED


def test_bland_terminates_on_beale_cycling_example():
    A = np.array([
        [1, 0, 0, 0.25, -8, -1, 9],
        [0, 1, 0, 0.5, -12, -0.5, 3],
        [0, 0, 1, 0, 0, 1, 0],
    ])
    c = np.array([0, 0, 0, -0.75, 20, -0.5, 6])
    sol = solve_lp(StandardFormLP(A, np.array([0.0, 0.0, 1.0]), c))
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(-1.25)


def test_certificates_on_optimal_solution(ot2x2):
    sol = solve_lp(ot2x2)
    A = ot2x2.dense_A()
    assert np.max(np.abs(A @ sol.x - ot2x2.b)) <= 1e-9
    assert sol.x.min() >= -1e-9
    assert sol.reduced_costs.min() >= -1e-9
    assert sol.objective == pytest.approx(ot2x2.b @ sol.dual, abs=1e-8)
    assert set(sol.to_dict()) == {"x", "basis", "objective", "status", "residuals"}


def test_rank_deficient_rejected():
    with pytest.raises(RankDeficient):
        StandardFormLP(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 1.0]), np.ones(2))


def test_plug_in_examples():
    np.testing.assert_allclose(plug_in_2x2([0.6, 0.4], [0.5, 0.5]), [[0.5, 0.1], [0.0, 0.4]])
    np.testing.assert_allclose(plug_in_2x2([0.5, 0.5], [0.5, 0.5]), [[0.5, 0], [0, 0.5]])
    with pytest.raises(DomainError):
        plug_in_2x2([0.7, 0.4], [0.5, 0.5])


@given(st.floats(0, 1), st.floats(0, 1))
def test_plug_in_matches_simplex(a, b):
    t, s = np.array([a, 1 - a]), np.array([b, 1 - b])
    lp = ot_to_lp(OtProblem(t, s, np.array([[0.0, 1.0], [1.0, 0.0]])))
    sol = solve_lp(lp)
    assert np.max(np.abs(sol.x - plug_in_2x2(t, s).ravel())) <= 1e-9


def _sol(x):
    x = np.asarray(x, dtype=float)
    return LpSolution(x, (), 0.0, OPTIMAL)


def test_zero_set_examples():
    assert zero_set(_sol([0.5, 0, 0, 0.5]), 1e-9).indices == (1, 2)
    assert zero_set(_sol([1, 0, 0]), 1e-9).indices == (1, 2)
    assert zero_set(_sol([1e-10, 1]), 1e-9).indices == (0,)
    with pytest.raises(AmbiguousZero):
        zero_set(_sol([5e-9, 1]), 1e-9)


def test_zero_set_partition():
    zs = zero_set(_sol([0.3, 0, 0.7, 0]))
    mask = zs.mask(4)
    assert mask.tolist() == [False, True, False, True]


def test_check_assumptions_examples(ot2x2):
    rep = check_assumptions(ot2x2)
    assert rep.row_rank_ok and rep.slater_ok and rep.unique_solution_ok
    # two nonzero entries against three constraints
    assert rep.degenerate
    dup = StandardFormLP(np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([1.0, 2.0]), np.ones(2),
                         require_full_rank=False)
    assert not check_assumptions(dup).row_rank_ok
    flat = StandardFormLP(ot2x2.A, ot2x2.b, np.zeros(4))
    assert not check_assumptions(flat).unique_solution_ok


def test_null_space_examples():
    Z = null_space_basis(np.array([[1.0, 1.0]]))
    assert Z.shape == (2, 1)
    np.testing.assert_allclose(np.abs(Z[:, 0]), [2 ** -0.5, 2 ** -0.5])
    assert Z[0, 0] == pytest.approx(-Z[1, 0])
    assert null_space_basis(np.eye(3)).shape == (3, 0)


@given(st.integers(0, 2 ** 32 - 1))
def test_null_space_property(seed):
    A = np.random.default_rng(seed).normal(size=(5, 8))
    Z = null_space_basis(A)
    assert np.max(np.abs(A @ Z)) <= 1e-12
    np.testing.assert_allclose(Z.T @ Z, np.eye(3), atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    t, s = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    lp = ot_to_lp(OtProblem(t, s, rng.uniform(0.1, 1, size=(3, 3))))
    A, b, c = lp.dense_A(), lp.b, lp.c
    rows, cols = rng.permutation(lp.k), rng.permutation(lp.m)
    sol = solve_lp(lp)
    perm = solve_lp(StandardFormLP(A[rows][:, cols], b[rows], c[cols]))
    np.testing.assert_allclose(perm.x, sol.x[cols], atol=1e-9)
