"""Standard-form linear programs and a dense revised simplex baseline.

A standard-form program is ``min <c, x>  s.t.  A x = b,  x >= 0``.  Plans of
transport problems are flattened row-major, ``(pi_11, pi_12, ..., pi_pp)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import AmbiguousZero, DomainError, NumericalBreakdown, RankDeficient

FEAS_TOL = 1e-9
PIVOT_FLOOR = 1e-7

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


def _numeric_rank(A, floor=PIVOT_FLOOR):
    if sp.issparse(A):
        # rank(A) = rank(A A^T); k is small enough for a dense Gram matrix
        gram = (A @ A.T).toarray()
        ev = np.linalg.eigvalsh(gram)
        if ev.size == 0 or ev[-1] <= 0:
            return 0
        return int(np.sum(ev > (floor**2) * ev[-1]))
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > floor * s[0]))


@dataclass(frozen=True, eq=False)
class StandardFormLP:
    """The triple ``(A, b, c)`` of ``min <c,x> s.t. Ax = b, x >= 0``.

    ``A`` may be a dense array or a scipy sparse matrix (stored as CSR).
    Full row rank is checked at construction unless ``require_full_rank`` is
    false, which is only meant for feeding deliberately broken programs to
    :func:`check_assumptions`.
    """

    A: object
    b: np.ndarray
    c: np.ndarray
    require_full_rank: bool = True

    def __post_init__(self):
        A = self.A
        if sp.issparse(A):
            A = sp.csr_matrix(A, dtype=float)
            data = A.data
        else:
            A = np.array(A, dtype=float, copy=True)
            if A.ndim == 1:
                A = A[None, :]
            data = A
        b = np.array(self.b, dtype=float, copy=True).reshape(-1)
        c = np.array(self.c, dtype=float, copy=True).reshape(-1)
        if A.ndim != 2:
            raise DomainError("A must be two-dimensional")
        k, m = A.shape
        if k < 1 or m < 1:
            raise DomainError("need at least one constraint and one variable")
        if b.shape != (k,) or c.shape != (m,):
            raise DomainError(f"shape mismatch: A {A.shape}, b {b.shape}, c {c.shape}")
        if not (np.all(np.isfinite(data)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise DomainError("entries must be finite")
        if self.require_full_rank:
            rank = _numeric_rank(A)
            if rank < k:
                raise RankDeficient(f"A has numeric rank {rank} < {k} rows")
        if isinstance(A, np.ndarray):
            A.setflags(write=False)
        b.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.A)

    def dense_A(self) -> np.ndarray:
        return self.A.toarray() if self.is_sparse else np.asarray(self.A)

    def with_b(self, b) -> "StandardFormLP":
        """Same program with a new right-hand side; skips the rank check."""
        new = object.__new__(StandardFormLP)
        b = np.array(b, dtype=float, copy=True).reshape(-1)
        if b.shape != (self.k,):
            raise DomainError(f"b must have length {self.k}")
        if not np.all(np.isfinite(b)):
            raise DomainError("entries must be finite")
        b.setflags(write=False)
        object.__setattr__(new, "A", self.A)
        object.__setattr__(new, "b", b)
        object.__setattr__(new, "c", self.c)
        object.__setattr__(new, "require_full_rank", self.require_full_rank)
        return new


@dataclass
class LpSolution:
    """Result of :func:`solve_lp`.

    ``dual`` holds the simplex multipliers ``lambda`` with
    ``c - A^T lambda = reduced_costs``.  For non-optimal statuses the vectors
    are filled with NaN.
    """

    x: np.ndarray
    basis: tuple
    objective: float
    status: str
    dual: np.ndarray = field(default=None)
    reduced_costs: np.ndarray = field(default=None)
    residuals: dict = field(default_factory=dict)
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "x": [float(v) for v in self.x],
            "basis": [int(i) for i in self.basis],
            "objective": float(self.objective),
            "status": self.status,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
        }


@dataclass(frozen=True)
class ZeroSet:
    indices: tuple
    tol: float

    def mask(self, m: int) -> np.ndarray:
        out = np.zeros(m, dtype=bool)
        out[list(self.indices)] = True
        return out


@dataclass(frozen=True)
class AssumptionReport:
    row_rank_ok: bool
    slater_ok: bool
    unique_solution_ok: bool
    degenerate: bool
    slater_margin: float = float("nan")

    @property
    def all_ok(self) -> bool:
        return self.row_rank_ok and self.slater_ok and self.unique_solution_ok


# ---------------------------------------------------------------------------
# revised simplex


def _bland_phase(A, b, c, basis, tol, max_iter, pivot_floor):
    """Run primal simplex iterations from a feasible basis.

    Entering column: smallest index with negative reduced cost.  Leaving row:
    minimum ratio, ties broken by smallest basic variable index.
    """
    k, m = A.shape
    basis = list(basis)
    for it in range(max_iter):
        B = A[:, basis]
        try:
            xB = np.linalg.solve(B, b)
            lam = np.linalg.solve(B.T, c[basis])
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("basis matrix became singular") from exc
        red = c - A.T @ lam
        red[basis] = 0.0
        entering = np.flatnonzero(red < -tol)
        if entering.size == 0:
            return basis, xB, lam, red, OPTIMAL, it
        j = int(entering[0])
        d = np.linalg.solve(B, A[:, j])
        pos = d > tol
        if not np.any(pos):
            return basis, xB, lam, red, UNBOUNDED, it
        ratios = np.full(k, np.inf)
        ratios[pos] = np.maximum(xB[pos], 0.0) / d[pos]
        theta = ratios.min()
        ties = np.flatnonzero(ratios <= theta + tol * max(1.0, theta))
        r = min(ties, key=lambda i: basis[i])
        if abs(d[r]) < pivot_floor * max(1.0, np.max(np.abs(d))):
            raise NumericalBreakdown(
                f"pivot {d[r]:.3e} below stability floor at iteration {it}")
        basis[r] = j
    raise NumericalBreakdown(f"simplex did not terminate within {max_iter} iterations")


def _drive_out_artificials(A_full, basis, m, pivot_floor):
    """Pivot zero-valued artificial columns out of an optimal phase-one basis."""
    basis = list(basis)
    for pos, var in enumerate(list(basis)):
        if var < m:
            continue
        B = A_full[:, basis]
        row = np.linalg.solve(B.T, np.eye(len(basis))[pos])  # row `pos` of B^{-1}
        alpha = row @ A_full[:, :m]
        alpha[[v for v in basis if v < m]] = 0.0
        cand = np.flatnonzero(np.abs(alpha) > pivot_floor)
        if cand.size == 0:
            raise RankDeficient("redundant constraint row detected in phase one")
        basis[pos] = int(cand[0])
    return basis


def solve_lp(lp: StandardFormLP, tol: float = FEAS_TOL, max_iter: Optional[int] = None,
             pivot_floor: float = PIVOT_FLOOR) -> LpSolution:
    """Solve a standard-form LP with the two-phase revised simplex method.

    Bland's rule is used in both phases so degenerate programs cannot cycle.
    The basis is refactorized with dense LU at every iteration.

    Raises
    ------
    NumericalBreakdown
        If a pivot falls below ``pivot_floor`` relative to its column.
    """
    A = lp.dense_A()
    b = np.asarray(lp.b, dtype=float).copy()
    c = np.asarray(lp.c, dtype=float)
    k, m = A.shape
    if max_iter is None:
        max_iter = 50 * (k + m) + 1000

    sign = np.where(b < 0, -1.0, 1.0)
    A1 = np.hstack([A * sign[:, None], np.eye(k)])
    b1 = b * sign
    c1 = np.concatenate([np.zeros(m), np.ones(k)])
    basis, xB, _, _, status, it1 = _bland_phase(
        A1, b1, c1, list(range(m, m + k)), tol, max_iter, pivot_floor)
    scale = 1.0 + np.max(np.abs(b))
    if float(np.sum(np.maximum(xB, 0.0)[np.asarray(basis) >= m])) > tol * scale * k:
        nan = np.full(m, np.nan)
        return LpSolution(nan, tuple(), float("nan"), INFEASIBLE, iterations=it1)
    basis = _drive_out_artificials(A1, basis, m, pivot_floor)

    basis, xB, lam, red, status, it2 = _bland_phase(A, b, c, basis, tol, max_iter, pivot_floor)
    if status == UNBOUNDED:
        nan = np.full(m, np.nan)
        return LpSolution(nan, tuple(sorted(basis)), -np.inf, UNBOUNDED, iterations=it1 + it2)

    x = np.zeros(m)
    x[basis] = xB
    x[np.abs(x) <= tol * tol] = 0.0
    red = c - A.T @ lam
    red[basis] = 0.0
    objective = float(c @ x)
    residuals = {
        "primal": float(np.max(np.abs(A @ x - b))),
        "nonnegativity": float(max(0.0, -x.min())),
        "dual": float(max(0.0, -red.min())),
        "gap": float(abs(objective - b @ lam)),
    }
    return LpSolution(x, tuple(sorted(int(i) for i in basis)), objective, OPTIMAL,
                      dual=lam, reduced_costs=red, residuals=residuals,
                      iterations=it1 + it2)


# ---------------------------------------------------------------------------
# closed form and structural checks


def _check_simplex(v, tol, name):
    v = np.asarray(v, dtype=float)
    if v.shape != (2,) or np.any(v < -tol) or abs(v.sum() - 1.0) > tol:
        raise DomainError(f"{name} must be a point of the 2-simplex, got {v}")
    return v


def plug_in_2x2(t_n, s_n, tol: float = 1e-9) -> np.ndarray:
    """Closed-form solution of the 2x2 transport problem with cost 1{i != j}.

    Returns the plan ``[[min(t1,s1), (t1-s1)+], [(t2-s2)+, min(t2,s2)]]``.
    """
    t = _check_simplex(t_n, tol, "t_n")
    s = _check_simplex(s_n, tol, "s_n")
    return np.array([
        [min(t[0], s[0]), max(t[0] - s[0], 0.0)],
        [max(t[1] - s[1], 0.0), min(t[1], s[1])],
    ])


def zero_set(sol: LpSolution, tol: float = FEAS_TOL) -> ZeroSet:
    """Indices of the entries of an optimal solution that are zero.

    Raises ``AmbiguousZero`` if an entry lies in ``(tol, 10 tol)``, since the
    partition would then depend on the exact choice of tolerance.
    """
    if sol.status != OPTIMAL:
        raise DomainError("zero_set needs an optimal solution")
    ax = np.abs(np.asarray(sol.x, dtype=float))
    straddle = np.flatnonzero((ax > tol) & (ax < 10 * tol))
    if straddle.size:
        raise AmbiguousZero(f"entries {straddle.tolist()} straddle tolerance {tol:g}")
    return ZeroSet(tuple(int(i) for i in np.flatnonzero(ax <= tol)), tol)


def null_space_basis(A, floor: float = PIVOT_FLOOR) -> np.ndarray:
    """Orthonormal basis ``Z`` (m x (m-k)) of the kernel of ``A``."""
    A = A.toarray() if sp.issparse(A) else np.atleast_2d(np.asarray(A, dtype=float))
    k, m = A.shape
    u, s, vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > floor * s[0])) if s.size and s[0] > 0 else 0
    if rank < k:
        raise RankDeficient(f"A has numeric rank {rank} < {k}")
    return vt[k:].T.copy()


def slater_point(lp: StandardFormLP, tol: float = FEAS_TOL):
    """Solve ``max s  s.t. Ax = b, x >= s 1, s <= 1``.

    Returns ``(s*, x)``; ``s* > 0`` exhibits a strictly positive feasible point.
    """
    A = lp.dense_A()
    k, m = A.shape
    # x = y + s 1 with y >= 0, s = sp - sn; cap row sp + u = 1
    a1 = A @ np.ones(m)
    top = np.hstack([A, a1[:, None], -a1[:, None], np.zeros((k, 1))])
    cap = np.zeros((1, m + 3))
    cap[0, m] = 1.0
    cap[0, m + 2] = 1.0
    A_aux = np.vstack([top, cap])
    b_aux = np.concatenate([lp.b, [1.0]])
    c_aux = np.zeros(m + 3)
    c_aux[m] = -1.0
    c_aux[m + 1] = 1.0
    aux = StandardFormLP(A_aux, b_aux, c_aux, require_full_rank=False)
    sol = solve_lp(aux, tol=tol)
    if sol.status != OPTIMAL:
        return float("-inf"), None
    s = float(sol.x[m] - sol.x[m + 1])
    return s, sol.x[:m] + s


def check_assumptions(lp: StandardFormLP, tol: float = FEAS_TOL) -> AssumptionReport:
    """Check full row rank, Slater's condition and (sufficient) uniqueness."""
    rank_ok = _numeric_rank(lp.A) == lp.k
    if not rank_ok:
        return AssumptionReport(False, False, False, False)
    margin, _ = slater_point(lp, tol)
    slater_ok = margin > tol
    sol = solve_lp(lp, tol=tol)
    if sol.status != OPTIMAL:
        return AssumptionReport(True, slater_ok, False, False, margin)
    nonbasic = np.setdiff1d(np.arange(lp.m), sol.basis)
    unique = bool(np.all(sol.reduced_costs[nonbasic] > tol)) if nonbasic.size else True
    degenerate = int(np.sum(np.abs(sol.x) > tol)) < lp.k
    return AssumptionReport(True, bool(slater_ok), unique, bool(degenerate), margin)
