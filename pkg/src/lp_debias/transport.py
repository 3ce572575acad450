"""Transport and flow problems, Sinkhorn, colocalization curves and file formats.

Plans are flattened row-major: entry ``(i, j)`` of a ``p1 x p2`` plan sits at
index ``i * p2 + j``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import (DomainError, ImageMismatch, NonConvergence, UnbalancedDemand,
                     UnsupportedPgm)
from .lp import OPTIMAL, StandardFormLP, solve_lp

SIMPLEX_TOL = 1e-12
# above this many plan entries the constraint matrix is built sparse
SPARSE_THRESHOLD = 4096
# Sinkhorn hands over to dual Newton after this many sweeps on problems this small
NEWTON_SWITCH = 200
NEWTON_MAX_SIZE = 1000


def _simplex_vector(v, name, tol=SIMPLEX_TOL):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size == 0 or np.any(v < -tol) or abs(v.sum() - 1.0) > max(tol, 1e-12 * v.size):
        raise DomainError(f"{name} must lie on the probability simplex")
    return v


@dataclass(frozen=True)
class OtProblem:
    t: np.ndarray
    s: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        t = _simplex_vector(self.t, "t")
        s = _simplex_vector(self.s, "s")
        cost = np.asarray(self.cost, dtype=float)
        if cost.shape != (t.size, s.size):
            raise DomainError(f"cost must be {t.size} x {s.size}, got {cost.shape}")
        if not np.all(np.isfinite(cost)):
            raise DomainError("cost must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "cost", cost)

    @property
    def shape(self):
        return self.cost.shape


def ot_rhs(t, s) -> np.ndarray:
    """Right-hand side of :func:`ot_to_lp`: ``t`` followed by ``s`` without its last entry."""
    return np.concatenate([np.asarray(t, dtype=float), np.asarray(s, dtype=float)[:-1]])


def ot_rhs_from_stat(stat) -> np.ndarray:
    """Map a concatenated ``(t_n, s_n)`` statistic to the LP right-hand side."""
    return np.asarray(stat, dtype=float)[:-1]


def ot_constraints(p1: int, p2: int, sparse: Optional[bool] = None):
    """Row-sum constraints, then column-sum constraints with the last one dropped."""
    if sparse is None:
        sparse = p1 * p2 > SPARSE_THRESHOLD
    rows, cols = [], []
    for i in range(p1):
        rows.extend([i] * p2)
        cols.extend(range(i * p2, (i + 1) * p2))
    for j in range(p2 - 1):
        rows.extend([p1 + j] * p1)
        cols.extend(range(j, p1 * p2, p2))
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(p1 + p2 - 1, p1 * p2))
    return A if sparse else A.toarray()


def ot_to_lp(prob: OtProblem, sparse: Optional[bool] = None) -> StandardFormLP:
    p1, p2 = prob.shape
    A = ot_constraints(p1, p2, sparse)
    return StandardFormLP(A, ot_rhs(prob.t, prob.s), prob.cost.reshape(-1))


def plan_marginals(x, p1: int, p2: int):
    P = np.asarray(x, dtype=float).reshape(p1, p2)
    return P.sum(axis=1), P.sum(axis=0)


def grid_points(L: int) -> np.ndarray:
    """``L^2`` equispaced points of the unit square, row-major."""
    if L < 1:
        raise DomainError("grid side must be at least 1")
    g = np.linspace(0.0, 1.0, L) if L > 1 else np.zeros(1)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def grid_cost(L: int, exponent: float = 1.0) -> np.ndarray:
    v = grid_points(L)
    diff = v[:, None, :] - v[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1)) ** exponent


def exact_plan(prob: OtProblem, backend: str = "auto") -> np.ndarray:
    """Optimal plan as a ``p1 x p2`` matrix.

    Small problems use the package simplex; larger ones go to HiGHS.
    """
    p1, p2 = prob.shape
    if backend == "auto":
        backend = "simplex" if p1 * p2 <= 400 else "highs"
    if backend == "simplex":
        sol = solve_lp(ot_to_lp(prob))
        if sol.status != OPTIMAL:
            raise NonConvergence(f"transport LP is {sol.status}")
        return sol.x.reshape(p1, p2)
    A = ot_constraints(p1, p2, sparse=True)
    res = linprog(prob.cost.reshape(-1), A_eq=A, b_eq=ot_rhs(prob.t, prob.s),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise NonConvergence(f"HiGHS failed: {res.message}")
    return np.maximum(res.x, 0.0).reshape(p1, p2)


# ---------------------------------------------------------------- entropic


@dataclass(frozen=True)
class EntropicPlan:
    plan: np.ndarray
    lam: float
    iterations: int
    marginal_residual: float


def sinkhorn(prob: OtProblem, lam: float, tol: float = 1e-10, max_iter: int = 100000) -> EntropicPlan:
    """Log-domain Sinkhorn for ``min <C, P> + lam sum P log P`` over couplings.

    The plan is ``diag(u) exp(-C/lam) diag(v)``; the potentials are kept in log
    form so that tiny ``lam`` does not underflow.
    """
    if not lam > 0:
        raise DomainError("entropic strength must be positive")
    t, s, C = prob.t, prob.s, prob.cost
    if np.any(t <= 0) or np.any(s <= 0):
        raise DomainError("sinkhorn needs strictly positive marginals; restrict the support first")
    log_t, log_s = np.log(t), np.log(s)
    M = -C / lam
    f = np.zeros(t.size)
    g = np.zeros(s.size)
    res = math.inf
    newton_tried = False
    for it in range(1, max_iter + 1):
        f = log_t - logsumexp(M + g[None, :], axis=1)
        g = log_s - logsumexp(M + f[:, None], axis=0)
        if it % 10 == 0 or it < 10:
            logP = M + f[:, None] + g[None, :]
            res = float(np.abs(np.exp(logsumexp(logP, axis=1)) - t).sum())
            if res <= tol:
                break
            if (it >= NEWTON_SWITCH and not newton_tried
                    and t.size + s.size <= NEWTON_MAX_SIZE):
                # scaling contracts slowly for small lam; finish with Newton
                newton_tried = True
                polished = _dual_newton(M, f, g, t, s, tol)
                if polished is not None:
                    f, g = polished
                    break
    else:
        raise NonConvergence(f"sinkhorn did not converge in {max_iter} iterations "
                             f"(marginal residual {res:.3e})")
    P = np.exp(M + f[:, None] + g[None, :])
    row = float(np.abs(P.sum(axis=1) - t).sum())
    col = float(np.abs(P.sum(axis=0) - s).sum())
    return EntropicPlan(P, float(lam), it, max(row, col))


def _dual_newton(M, f, g, t, s, tol, max_iter=60):
    """Newton on ``phi(f, g) = sum exp(M + f + g) - <t, f> - <s, g>``.

    ``phi`` is convex and its gradient is the pair of marginal residuals.  The
    last column potential is held fixed to remove the shift invariance.
    Returns ``None`` if the line search stalls.
    """
    p1, p2 = M.shape

    def plan(f, g):
        return np.exp(M + f[:, None] + g[None, :])

    def phi(P, f, g):
        return P.sum() - t @ f - s @ g

    P = plan(f, g)
    val = phi(P, f, g)
    for _ in range(max_iter):
        rows, cols = P.sum(axis=1), P.sum(axis=0)
        grad = np.concatenate([rows - t, (cols - s)[:-1]])
        if np.abs(rows - t).sum() <= tol and np.abs(cols - s).sum() <= tol:
            return f, g
        H = np.zeros((p1 + p2 - 1, p1 + p2 - 1))
        H[:p1, :p1] = np.diag(rows)
        H[p1:, p1:] = np.diag(cols[:-1])
        H[:p1, p1:] = P[:, :-1]
        H[p1:, :p1] = P[:, :-1].T
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return None
        slope = float(grad @ step)
        if not slope < 0:
            return None
        a = 1.0
        while a > 1e-12:
            f_new = f + a * step[:p1]
            g_new = g.copy()
            g_new[:-1] += a * step[p1:]
            with np.errstate(over="ignore"):
                P_new = plan(f_new, g_new)
                new_val = phi(P_new, f_new, g_new)
            if np.isfinite(new_val) and (new_val <= val + 1e-4 * a * slope
                                         or abs(new_val - val) <= 1e-15 * (1 + abs(val))):
                break
            a *= 0.5
        else:
            return None
        f, g, P, val = f_new, g_new, P_new, new_val
    return None


def entropic_bias_profile(prob: OtProblem, lambda_list: Sequence[float],
                          plan_star: Optional[np.ndarray] = None) -> list[dict]:
    """Sup-norm distance of the entropic plan from the LP plan for each ``lam``."""
    if plan_star is None:
        plan_star = exact_plan(prob)
    rows = []
    for lam in lambda_list:
        ep = sinkhorn(prob, lam)
        err = float(np.max(np.abs(ep.plan - plan_star)))
        rate = lam * math.log(1.0 / err) if 0 < err < 1 else math.nan
        rows.append({"lambda": float(lam), "error": err, "rate": rate})
    return rows


# ---------------------------------------------------------------- colocalization


@dataclass(frozen=True)
class ColocCurve:
    xi_grid: np.ndarray
    values: np.ndarray


def colocalization(plan, cost, xi_grid) -> ColocCurve:
    """``Col(xi) = sum_ij plan_ij 1{c_ij <= xi}``."""
    xi = np.asarray(xi_grid, dtype=float)
    if np.any(np.diff(xi) < 0):
        raise DomainError("xi grid must be sorted")
    P = np.asarray(plan, dtype=float).reshape(-1)
    c = np.asarray(cost, dtype=float).reshape(-1)
    order = np.argsort(c, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(P[order])])
    pos = np.searchsorted(c[order], xi, side="right")
    return ColocCurve(xi, cum[pos])


def coloc_operator(cost, xi_grid) -> sp.csr_matrix:
    """Sparse matrix ``K`` with ``K @ plan.ravel() = Col(plan)`` on ``xi_grid``."""
    c = np.asarray(cost, dtype=float).reshape(-1)
    xi = np.asarray(xi_grid, dtype=float)
    return sp.csr_matrix((c[None, :] <= xi[:, None]).astype(float))


@dataclass(frozen=True)
class Support:
    """Indices of the nonzero atoms of a marginal and the restricted vector."""

    index: np.ndarray
    weights: np.ndarray
    size: int


def restrict_support(v, tol: float = 0.0) -> Support:
    v = np.asarray(v, dtype=float)
    idx = np.flatnonzero(v > tol)
    w = v[idx]
    return Support(idx, w / w.sum(), v.size)


def embed_plan(plan_small, rows: Support, cols: Support) -> np.ndarray:
    """Place a support-restricted plan back into the full ``p1 x p2`` grid."""
    full = np.zeros((rows.size, cols.size))
    full[np.ix_(rows.index, cols.index)] = np.asarray(plan_small).reshape(rows.index.size,
                                                                            cols.index.size)
    return full


# ---------------------------------------------------------------- flows


@dataclass(frozen=True)
class FlowProblem:
    d: np.ndarray
    cost: np.ndarray
    tol: float = 1e-9

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).reshape(-1)
        cost = np.asarray(self.cost, dtype=float)
        N = d.size
        if N < 2:
            raise DomainError("a flow problem needs at least two stations")
        if cost.shape != (N, N):
            raise DomainError(f"cost must be {N} x {N}")
        if abs(d.sum()) > self.tol * (1.0 + np.abs(d).sum()):
            raise UnbalancedDemand(f"net demands sum to {d.sum():.3e}, not 0")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "cost", cost)

    @property
    def N(self) -> int:
        return self.d.size


def flow_arcs(N: int) -> list[tuple[int, int]]:
    """Off-diagonal arcs ``(i, j)`` in row-major order; the variable order of the flow LP."""
    return [(i, j) for i in range(N) for j in range(N) if i != j]


def flow_constraints(N: int) -> np.ndarray:
    arcs = flow_arcs(N)
    A = np.zeros((N - 1, len(arcs)))
    for col, (i, j) in enumerate(arcs):
        if i < N - 1:
            A[i, col] += 1.0
        if j < N - 1:
            A[j, col] -= 1.0
    return A


def rebalance_to_lp(prob: FlowProblem) -> StandardFormLP:
    """``min sum c_ij pi_ij  s.t.  sum_j pi_ij - pi_ji = d_i`` (last station dropped)."""
    arcs = flow_arcs(prob.N)
    c = np.array([prob.cost[i, j] for i, j in arcs])
    return StandardFormLP(flow_constraints(prob.N), prob.d[:-1], c)


def project_balanced(D) -> np.ndarray:
    """Subtract each row's mean imbalance so every row sums to zero exactly."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    return D - D.mean(axis=1, keepdims=True)


# ---------------------------------------------------------------- file formats


def _pgm_tokens(raw: bytes):
    """Yield header tokens and the offset just past the last header token."""
    tokens, pos = [], 0
    n = len(raw)
    while len(tokens) < 4:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise UnsupportedPgm("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit PGM (P2 ASCII or P5 binary) into an integer array."""
    raw = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(raw)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise UnsupportedPgm(f"unsupported magic number {magic!r}")
    try:
        width, height, maxval = (int(tok) for tok in tokens[1:4])
    except ValueError as exc:
        raise UnsupportedPgm("malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise UnsupportedPgm(f"bad PGM dimensions or maxval ({width}x{height}, {maxval})")
    count = width * height
    if magic == b"P2":
        vals = raw[pos:].split()
        if len(vals) < count:
            raise UnsupportedPgm("P2 body is shorter than width*height")
        img = np.array([int(v) for v in vals[:count]], dtype=np.int64)
    else:
        body = raw[pos + 1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(body) < count * dtype.itemsize:
            raise UnsupportedPgm("P5 body is shorter than width*height")
        img = np.frombuffer(body, dtype=dtype, count=count).astype(np.int64)
    if img.max(initial=0) > maxval:
        raise UnsupportedPgm("pixel value exceeds maxval")
    return img.reshape(height, width)


def write_pgm(path, img, binary: bool = True, maxval: Optional[int] = None) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise UnsupportedPgm("PGM images are two-dimensional")
    if np.any(img < 0):
        raise UnsupportedPgm("PGM pixels are nonnegative")
    maxval = int(img.max(initial=0)) if maxval is None else int(maxval)
    maxval = max(maxval, 1)
    if maxval > 65535:
        raise UnsupportedPgm("PGM supports at most 16-bit pixels")
    h, w = img.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n{maxval}\n".encode()
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        body = img.astype(dtype).tobytes()
    else:
        body = ("\n".join(" ".join(str(int(v)) for v in row) for row in img) + "\n").encode()
    Path(path).write_bytes(header + body)


def image_to_simplex(img) -> np.ndarray:
    """Row-major pixel intensities normalized to a probability vector."""
    v = np.asarray(img, dtype=float).reshape(-1)
    total = v.sum()
    if not total > 0:
        raise DomainError("image has no mass")
    return v / total


def check_same_shape(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ImageMismatch(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def write_plan_csv(path, plan, tol: float = 0.0) -> int:
    """Write entries with ``|value| > tol`` as ``i,j,value`` rows; returns the row count."""
    P = np.asarray(plan, dtype=float)
    ii, jj = np.nonzero(np.abs(P) > tol)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "value"])
        for i, j in zip(ii, jj):
            w.writerow([int(i), int(j), f"{P[i, j]:.17g}"])
    return len(ii)


def read_plan_csv(path, shape) -> np.ndarray:
    P = np.zeros(shape)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "i":
                continue
            P[int(row[0]), int(row[1])] = float(row[2])
    return P
