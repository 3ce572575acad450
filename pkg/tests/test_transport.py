import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lp_debias.errors import DomainError, ImageMismatch, NonConvergence, UnbalancedDemand, UnsupportedPgm
from lp_debias.inference import SamplingModel, sample_empirical
from lp_debias.lp import solve_lp
from lp_debias.transport import (FlowProblem, OtProblem, check_same_shape, coloc_operator,
                                 colocalization, embed_plan, entropic_bias_profile, exact_plan,
                                 grid_cost, image_to_simplex, ot_to_lp, plan_marginals,
                                 project_balanced, read_pgm, read_plan_csv, rebalance_to_lp,
                                 restrict_support, sinkhorn, write_pgm, write_plan_csv)

HALF = np.array([0.5, 0.5])
SYM = np.array([[0.0, 1.0], [1.0, 0.0]])


def random_simplex(rng, p):
    return rng.dirichlet(np.ones(p))


def test_ot_to_lp_2x2():
    t, s = np.array([0.3, 0.7]), np.array([0.6, 0.4])
    lp = ot_to_lp(OtProblem(t, s, SYM))
    np.testing.assert_array_equal(lp.dense_A(), [[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0]])
    np.testing.assert_array_equal(lp.b, [0.3, 0.7, 0.6])
    prod = np.outer(t, s).ravel()
    np.testing.assert_allclose(lp.dense_A() @ prod, lp.b, atol=1e-15)


@pytest.mark.parametrize("p", range(2, 11))
def test_ot_constraint_rank(p):
    rng = np.random.default_rng(p)
    prob = OtProblem(random_simplex(rng, p), random_simplex(rng, p), rng.random((p, p)))
    A = ot_to_lp(prob).dense_A()
    assert A.shape == (2 * p - 1, p * p)
    assert np.linalg.matrix_rank(A) == 2 * p - 1


def test_ot_marginals_reconstructed():
    rng = np.random.default_rng(0)
    t, s = random_simplex(rng, 4), random_simplex(rng, 4)
    P = exact_plan(OtProblem(t, s, rng.random((4, 4))))
    rows, cols = plan_marginals(P, 4, 4)
    np.testing.assert_allclose(rows, t, atol=1e-12)
    np.testing.assert_allclose(cols, s, atol=1e-12)


def test_ot_problem_validation():
    with pytest.raises(DomainError):
        OtProblem([0.6, 0.6], HALF, SYM)
    with pytest.raises(DomainError):
        OtProblem(HALF, HALF, np.ones((3, 3)))
    with pytest.raises(DomainError):
        OtProblem(HALF, HALF, [[0, np.inf], [1, 0]])


def test_diagonal_plan_for_zero_diagonal_cost():
    rng = np.random.default_rng(3)
    t = random_simplex(rng, 5)
    C = rng.uniform(0.5, 2.0, (5, 5))
    np.fill_diagonal(C, 0.0)
    sol = solve_lp(ot_to_lp(OtProblem(t, t, C)))
    np.testing.assert_allclose(sol.x.reshape(5, 5), np.diag(t), atol=1e-12)


def test_grid_cost():
    C = grid_cost(2)
    assert C[0, 3] == pytest.approx(math.sqrt(2))
    np.testing.assert_array_equal(np.diag(C), 0.0)
    C5 = grid_cost(5)
    np.testing.assert_array_equal(C5, C5.T)
    assert C5.shape == (25, 25)
    np.testing.assert_allclose(grid_cost(3, 2.0), grid_cost(3) ** 2)
    with pytest.raises(DomainError):
        grid_cost(0)


def test_exact_plan_backends_agree():
    rng = np.random.default_rng(1)
    prob = OtProblem(random_simplex(rng, 6), random_simplex(rng, 6), rng.random((6, 6)))
    a, b = exact_plan(prob, "simplex"), exact_plan(prob, "highs")
    assert np.sum(a * prob.cost) == pytest.approx(np.sum(b * prob.cost), abs=1e-10)


def test_sinkhorn_closed_form_2x2():
    for lam in (0.1, 0.5, 2.0):
        P = sinkhorn(OtProblem(HALF, HALF, SYM), lam).plan
        k = math.exp(-1 / lam)
        assert P[0, 1] == pytest.approx(0.5 * k / (1 + k), rel=1e-9)
        np.testing.assert_allclose(P, P.T, atol=1e-9)


def test_sinkhorn_product_limit():
    rng = np.random.default_rng(2)
    t, s = random_simplex(rng, 4), random_simplex(rng, 4)
    P = sinkhorn(OtProblem(t, s, rng.random((4, 4))), 1e6).plan
    assert np.max(np.abs(P - np.outer(t, s))) <= 1e-5


@given(st.integers(0, 10 ** 6))
def test_sinkhorn_marginals_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    t, s = random_simplex(rng, 10), random_simplex(rng, 10)
    X = rng.random((10, 2))
    C = np.linalg.norm(X[:, None] - X[None], axis=-1)
    ep = sinkhorn(OtProblem(t, s, C), 0.3)
    assert np.all(ep.plan > 0)
    np.testing.assert_allclose(ep.plan.sum(axis=1), t, atol=1e-9)
    np.testing.assert_allclose(ep.plan.sum(axis=0), s, atol=1e-9)
    sym = sinkhorn(OtProblem(t, t, C), 0.3).plan
    np.testing.assert_allclose(sym, sym.T, atol=1e-9)


def test_sinkhorn_errors():
    with pytest.raises(DomainError):
        sinkhorn(OtProblem(HALF, HALF, SYM), 0.0)
    with pytest.raises(DomainError):
        sinkhorn(OtProblem([1.0, 0.0], HALF, SYM), 1.0)
    with pytest.raises(NonConvergence):
        sinkhorn(OtProblem([0.3, 0.7], [0.6, 0.4], SYM), 1e-3, max_iter=3)


def test_entropic_profile_rate():
    rows = entropic_bias_profile(OtProblem(HALF, HALF, SYM), [0.05, 0.1, 0.2])
    for row in rows:
        k = math.exp(-1 / row["lambda"])
        assert row["error"] == pytest.approx(0.5 * k / (1 + k), rel=1e-8)
    rates = [row["rate"] for row in rows]
    assert rates[0] == pytest.approx(1.0, abs=0.05)
    assert abs(rates[0] - 1) < abs(rates[-1] - 1)


def test_entropic_product_limit_distance():
    row = entropic_bias_profile(OtProblem(HALF, HALF, SYM), [1e6])[0]
    assert row["error"] == pytest.approx(0.25, abs=1e-5)


def test_entropic_bias_persists_under_sampling():
    cost = np.array([[0.0, 1.0], [2.0, 0.0]])
    star = np.diag(HALF)
    pop = np.max(np.abs(sinkhorn(OtProblem(HALF, HALF, cost), 2.0).plan - star))
    obs = sample_empirical(SamplingModel.multinomial([HALF, HALF], 100000, seed=0))
    emp = sinkhorn(OtProblem(*obs.freqs, cost), 2.0).plan
    assert np.max(np.abs(emp - star)) >= pop / 2


def test_colocalization_examples():
    rng = np.random.default_rng(4)
    t = random_simplex(rng, 5)
    C = rng.uniform(1, 3, (5, 5))
    np.fill_diagonal(C, 0.0)
    xi = np.array([-1.0, 0.0, 0.5, 2.0, 3.0, 10.0])
    col = colocalization(np.diag(t), C, xi).values
    np.testing.assert_allclose(col, [0, 1, 1, 1, 1, 1], atol=1e-15)
    P = np.outer(t, t)
    vals = colocalization(P, C, xi).values
    assert vals[0] == 0.0 and vals[-1] == pytest.approx(1.0)
    assert np.all(np.diff(vals) >= 0)
    with pytest.raises(DomainError):
        colocalization(P, C, xi[::-1])


@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
def test_colocalization_additive(seed, a, b):
    rng = np.random.default_rng(seed)
    P, Q, C = rng.random((4, 4)), rng.random((4, 4)), rng.random((4, 4))
    xi = np.linspace(0, 1, 7)
    lhs = colocalization(a * P + b * Q, C, xi).values
    rhs = a * colocalization(P, C, xi).values + b * colocalization(Q, C, xi).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    np.testing.assert_allclose(coloc_operator(C, xi) @ P.ravel(),
                               colocalization(P, C, xi).values, atol=1e-12)


def test_rebalance_two_stations():
    lp = rebalance_to_lp(FlowProblem([3.0, -3.0], SYM))
    np.testing.assert_array_equal(lp.dense_A(), [[1.0, -1.0]])
    np.testing.assert_array_equal(lp.b, [3.0])
    sol = solve_lp(lp)
    np.testing.assert_allclose(sol.x, [3.0, 0.0])


def test_rebalance_examples():
    unit = np.ones((3, 3)) - np.eye(3)
    assert solve_lp(rebalance_to_lp(FlowProblem([2.0, -1.0, -1.0], unit))).objective == pytest.approx(2.0)
    sol = solve_lp(rebalance_to_lp(FlowProblem(np.zeros(3), unit)))
    np.testing.assert_array_equal(sol.x, 0.0)
    with pytest.raises(UnbalancedDemand):
        FlowProblem([1.0, 0.0], SYM)


def test_project_balanced():
    D = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, -3.0]])
    P = project_balanced(D)
    np.testing.assert_allclose(P.sum(axis=1), 0.0, atol=1e-15)
    np.testing.assert_allclose(project_balanced(P), P)


@pytest.mark.parametrize("binary,maxval", [(True, 255), (False, 255), (True, 65535), (False, 1000)])
def test_pgm_round_trip(tmp_path, binary, maxval):
    img = np.random.default_rng(0).integers(0, maxval + 1, (5, 7))
    path = tmp_path / "img.pgm"
    write_pgm(path, img, binary=binary, maxval=maxval)
    np.testing.assert_array_equal(read_pgm(path), img)


def test_pgm_comments_and_errors(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P2\n# comment\n2 1\n# another\n9\n3 9\n")
    np.testing.assert_array_equal(read_pgm(path), [[3, 9]])
    for body in (b"P3\n1 1\n255\n0 0 0\n", b"P2\n2 2\n255\n1 2\n", b"P2\n1 1\n5\n7\n", b"P5\n1\n"):
        path.write_bytes(body)
        with pytest.raises(UnsupportedPgm):
            read_pgm(path)
    with pytest.raises(UnsupportedPgm):
        write_pgm(path, np.array([[70000]]))


def test_image_helpers():
    with pytest.raises(ImageMismatch):
        check_same_shape(np.zeros((2, 3)), np.zeros((3, 2)))
    np.testing.assert_allclose(image_to_simplex([[1, 3]]), [0.25, 0.75])
    with pytest.raises(DomainError):
        image_to_simplex(np.zeros((2, 2)))


def test_plan_csv_round_trip(tmp_path):
    P = np.array([[0.1, 0.0], [1 / 3, 0.5666]])
    path = tmp_path / "plan.csv"
    assert write_plan_csv(path, P) == 3
    np.testing.assert_array_equal(read_plan_csv(path, P.shape), P)


def test_support_restriction_and_embed():
    t = np.array([0.0, 0.25, 0.0, 0.75])
    s = np.array([0.5, 0.0, 0.5])
    rows, cols = restrict_support(t), restrict_support(s)
    np.testing.assert_array_equal(rows.index, [1, 3])
    np.testing.assert_array_equal(cols.index, [0, 2])
    C = np.arange(12.0).reshape(4, 3)
    small = exact_plan(OtProblem(rows.weights, cols.weights, C[np.ix_(rows.index, cols.index)]))
    full = embed_plan(small, rows, cols)
    r, c = plan_marginals(full, 4, 3)
    np.testing.assert_allclose(r, t, atol=1e-12)
    np.testing.assert_allclose(c, s, atol=1e-12)


def test_sinkhorn_small_lambda_newton_finish():
    # 2x2 entropic plans are pinned by the marginals and the cross ratio exp(3/lam)
    from scipy.optimize import brentq
    t, s = np.array([0.3, 0.7]), np.array([0.6, 0.4])
    C = np.array([[0.0, 1.0], [2.0, 0.0]])
    for lam in (0.145, 0.087):
        ep = sinkhorn(OtProblem(t, s, C), lam)
        a = brentq(lambda a: np.log(a) + np.log(0.1 + a) - np.log(0.3 - a) - np.log(0.6 - a)
                   - 3 / lam, 1e-200, 0.3 - 1e-16, xtol=1e-15)
        want = np.array([[a, 0.3 - a], [0.6 - a, 0.1 + a]])
        assert ep.iterations < 1000
        assert np.max(np.abs(ep.plan - want)) < 1e-9
