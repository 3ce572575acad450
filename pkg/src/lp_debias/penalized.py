"""Newton's method on the smooth dual of the penalized LP.

The penalized program ``min <c,x> + r sum p(-x_i/r)  s.t.  Ax = b`` has the
unconstrained concave dual

    g(lam) = <b, lam> - r sum_i q(eta_i),   eta = c - A^T lam,

on the open set ``eta > 0``.  The primal point is recovered as
``x = -r q'(eta)``, so ``grad g = b - A x`` and ``-hess g = r A diag(q''(eta)) A^T``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import (DomainError, DomainViolation, Diverged, DualInfeasibleStart,
                     SolveFailed, LpDebiasError)
from .lp import OPTIMAL, StandardFormLP, slater_point, solve_lp
from .penalty import PenaltySpec

X_LIMIT = 1e12
ARMIJO = 1e-4
# relative floor on primal curvatures: coordinates deep inside the support of a
# non-unique LP optimum have curvature that underflows, leaving flat directions
CURVATURE_FLOOR = 1e-12


@dataclass
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 200
    fraction_to_boundary: float = 0.95
    warm_start: Optional[np.ndarray] = None
    record_trace: bool = False
    warm_x: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise DomainError("tol must be positive")
        if not 0 < self.fraction_to_boundary < 1:
            raise DomainError("fraction_to_boundary must lie in (0, 1)")
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")

    def with_warm_start(self, lam, x=None) -> "SolverOptions":
        return SolverOptions(self.tol, self.max_iter, self.fraction_to_boundary,
                             None if lam is None else np.array(lam, dtype=float),
                             self.record_trace,
                             None if x is None else np.array(x, dtype=float))


@dataclass
class PenalizedSolution:
    x: np.ndarray
    lam: np.ndarray
    eta: np.ndarray
    r: float
    iterations: int
    primal_residual: float
    newton_decrement: float
    dual_objective: float
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "lambda": self.lam.tolist(),
            "eta": self.eta.tolist(),
            "r": self.r,
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "newton_decrement": self.newton_decrement,
            "dual_objective": self.dual_objective,
        }


def dual_feasible_start(lp: StandardFormLP, pen: PenaltySpec | None = None):
    """A multiplier ``lam0`` with ``c - A^T lam0 > 0`` entrywise.

    Returns ``(lam0, margin)``.  Full-domain conjugates need no interior start
    and get the origin, as does any ``c`` with ``min c > 0``.  Otherwise
    ``max s  s.t.  c - A^T lam >= s 1`` is solved with the simplex baseline.
    That program is unbounded whenever ``A`` has a direction that raises every
    entry of ``c - A^T lam``, so ``s`` is capped at half the largest cost.
    """
    c = np.asarray(lp.c, dtype=float)
    k, m = lp.k, lp.m
    if c.min() > 0 or (pen is not None and not np.isfinite(pen.dom_p_upper)):
        return np.zeros(k), float(c.min())
    At = lp.dense_A().T
    s_cap = 0.5 * float(np.max(np.abs(c))) or 1.0
    if m > AUX_SIMPLEX_LIMIT:
        lam = _aux_start_highs(At, c, s_cap)
    else:
        lam = _aux_start_simplex(At, c, s_cap)
    margin = float(np.min(c - At @ lam))
    if margin <= 0:
        raise DualInfeasibleStart(f"recovered start has margin {margin:.3e}")
    return lam, margin


AUX_SIMPLEX_LIMIT = 64


def _no_start():
    return DualInfeasibleStart(
        "no multiplier makes c - A^T lam strictly positive; the LP solution set is unbounded")


def _aux_start_simplex(At, c, s_cap):
    m, k = At.shape
    # variables: lam+ (k), lam- (k), s (1, s >= 0 suffices), slack w (m), cap slack u (1)
    top = np.hstack([At, -At, np.ones((m, 1)), np.eye(m), np.zeros((m, 1))])
    cap = np.zeros((1, 2 * k + m + 2))
    cap[0, 2 * k] = 1.0
    cap[0, -1] = 1.0
    A_aux = np.vstack([top, cap])
    b_aux = np.concatenate([c, [s_cap]])
    c_aux = np.zeros(2 * k + m + 2)
    c_aux[2 * k] = -1.0
    sol = solve_lp(StandardFormLP(A_aux, b_aux, c_aux, require_full_rank=False))
    if sol.status != OPTIMAL or sol.x[2 * k] <= 1e-9:
        raise _no_start()
    return sol.x[:k] - sol.x[k:2 * k]


def _aux_start_highs(At, c, s_cap):
    """Same program through HiGHS; Bland pivoting is too slow past a few dozen rows."""
    m, k = At.shape
    obj = np.zeros(k + 1)
    obj[-1] = -1.0
    res = linprog(obj, A_ub=np.hstack([At, np.ones((m, 1))]), b_ub=c,
                  bounds=[(None, None)] * k + [(0.0, s_cap)], method="highs")
    if res.status != 0 or res.x[-1] <= 1e-9:
        raise _no_start()
    return res.x[:k]


def _hessian(A, w):
    if sp.issparse(A):
        return (A @ sp.diags(w) @ A.T).toarray()
    return (A * w) @ A.T


def _spd_solve(H, g):
    """Solve ``H d = g`` for SPD ``H`` with Jacobi scaling and Levenberg fallback."""
    diag = np.diag(H).copy()
    diag[diag <= 0] = 1.0
    s = 1.0 / np.sqrt(diag)
    Hs = H * s[:, None] * s[None, :]
    gs = g * s
    mu = 0.0
    for _ in range(12):
        try:
            cf = sla.cho_factor(Hs + mu * np.eye(len(g)), lower=True, check_finite=False)
            return s * sla.cho_solve(cf, gs, check_finite=False)
        except np.linalg.LinAlgError:
            mu = 1e-14 if mu == 0.0 else mu * 100.0
    raise Diverged("Newton system could not be factorized even with damping")


def _dual_value(lp, pen, r, lam, eta):
    eta = np.asarray(eta)
    if np.isfinite(pen.dom_p_upper):
        return float(lp.b @ lam - r * np.sum(pen.q(eta)))
    # full-domain penalties: q(0+) = -p(-inf) = 0, so underflowed entries drop out
    return float(lp.b @ lam - r * np.sum(pen.q(eta[eta > 0])))


def solve_penalized(lp: StandardFormLP, pen: PenaltySpec, r: float,
                    opts: SolverOptions | None = None, method: str = "auto") -> PenalizedSolution:
    """Solve ``min <c,x> + r sum_i p(-x_i/r)  s.t.  Ax = b``.

    ``method="dual"`` runs Newton on the multiplier ``lam``; ``"primal"`` runs
    equality-constrained Newton on ``x``.  ``"auto"`` picks the dual for
    penalties whose domain is bounded above (log barrier, inverse polynomial)
    and the primal otherwise, falling back to the primal if the dual stalls.
    For exponential-type tails the basic entries of ``eta`` are of order
    ``exp(-x_i/r)`` and cannot be resolved as a difference ``c - A^T lam`` in
    double precision.
    """
    if not r > 0:
        raise DomainError(f"penalty strength must be positive, got {r}")
    opts = opts or SolverOptions()
    if method == "auto":
        if not np.isfinite(pen.dom_p_upper):
            return _solve_primal(lp, pen, float(r), opts)
        try:
            return _solve_dual(lp, pen, float(r), opts)
        except (Diverged, DomainViolation):
            # the dual recovery loses digits when eta is tiny; the primal
            # iteration does not have that cancellation
            return _solve_primal(lp, pen, float(r), opts)
    if method == "dual":
        return _solve_dual(lp, pen, float(r), opts)
    if method == "primal":
        return _solve_primal(lp, pen, float(r), opts)
    raise DomainError(f"unknown method {method!r}")


def _solve_dual(lp, pen, r, opts):
    A, b, c = lp.A, np.asarray(lp.b), np.asarray(lp.c)
    lam = None
    if opts.warm_start is not None:
        cand = np.asarray(opts.warm_start, dtype=float)
        if cand.shape == (lp.k,) and np.all(c - A.T @ cand > 0):
            lam = cand.copy()
    if lam is None:
        # every catalog conjugate derivative lives on (0, inf), so the dual
        # iteration needs an interior start even for full-domain penalties
        lam, _ = dual_feasible_start(lp)
    feas_tol = opts.tol * (1.0 + np.max(np.abs(b)))
    trace = []
    eta = c - A.T @ lam
    g_val = _dual_value(lp, pen, r, lam, eta)
    res = np.inf
    for it in range(opts.max_iter + 1):
        x = -r * pen.dq(eta)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > X_LIMIT:
            raise Diverged(f"primal recovery exceeded {X_LIMIT:g} at iteration {it}")
        grad = b - A @ x
        res = float(np.max(np.abs(grad)))
        H = r * _hessian(A, pen.d2q(eta))
        delta = _spd_solve(H, grad)
        slope = float(grad @ delta)
        if opts.record_trace:
            trace.append({"iteration": it, "dual_objective": g_val, "residual": res,
                          "decrement2": slope})
        if res <= feas_tol and slope <= opts.tol:
            return PenalizedSolution(x, lam, eta, r, it, res,
                                     float(np.sqrt(max(slope, 0.0))), g_val, trace)
        if it == opts.max_iter:
            break
        d_eta = -(A.T @ delta)
        neg = d_eta < 0
        t = 1.0
        if np.any(neg):
            t = min(1.0, opts.fraction_to_boundary * float(np.min(-eta[neg] / d_eta[neg])))
        accepted = False
        for _ in range(60):
            lam_new = lam + t * delta
            eta_new = c - A.T @ lam_new
            if np.all(eta_new > 0):
                g_new = _dual_value(lp, pen, r, lam_new, eta_new)
                if g_new >= g_val + ARMIJO * t * slope:
                    accepted = True
                    break
                # round-off regime: the predicted gain is below objective precision
                if slope < 1e-13 * (1.0 + abs(g_val)) and g_new >= g_val - 1e-13 * (1.0 + abs(g_val)):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            if not np.all(c - A.T @ (lam + t * delta) > 0):
                raise DomainViolation("line search could not keep eta interior")
            raise Diverged(f"line search stalled at iteration {it} (residual {res:.3e})")
        lam, eta, g_val = lam_new, eta_new, g_new
    raise Diverged(f"no convergence within {opts.max_iter} Newton iterations "
                   f"(residual {res:.3e})")


def _in_domain(pen, u):
    return bool(np.all(u < pen.dom_p_upper) and np.all(u <= pen.max_arg))


def _affine_correction(lp, x):
    """Least-norm ``dx`` with ``A (x + dx) = b``."""
    A = lp.A
    rp = lp.b - A @ x
    AAt = (A @ A.T).toarray() if sp.issparse(A) else A @ A.T
    return A.T @ np.linalg.solve(AAt, rp)


def _primal_start(lp, pen, r, warm_x):
    if warm_x is not None:
        cand = np.asarray(warm_x, dtype=float)
        if cand.shape == (lp.m,):
            cand = cand + _affine_correction(lp, cand)
            if _in_domain(pen, -cand / r):
                return cand
    if np.isfinite(pen.dom_p_upper):
        margin, x0 = slater_point(lp)
        if x0 is None or not margin > 0:
            raise DomainViolation("no strictly positive feasible point to start from")
        return x0
    # an LP vertex is within O(r) of the penalized solution
    sol = solve_lp(lp)
    if sol.status == OPTIMAL:
        return sol.x.copy()
    return _affine_correction(lp, np.zeros(lp.m))


def _kkt_step(A, h, g, rp):
    """Solve ``[diag(h) A^T; A 0] [dx; nu] = [-g; rp]``.

    Coordinates with large curvature are eliminated; the rest stay in an
    explicit symmetric indefinite system.  Eliminating everything (the usual
    Schur complement) would divide by curvatures that can be as small as
    ``exp(-x/r)`` and destroy the step.
    """
    k = A.shape[0]
    big = h > 1.0
    S = np.flatnonzero(~big)
    N = np.flatnonzero(big)
    AS = A[:, S]
    AN = A[:, N]
    if sp.issparse(A):
        AS = AS.toarray()
        C = (AN @ sp.diags(1.0 / h[N]) @ AN.T).toarray()
    else:
        C = (AN / h[N]) @ AN.T
    ns = len(S)
    K = np.zeros((ns + k, ns + k))
    K[:ns, :ns] = np.diag(h[S])
    K[:ns, ns:] = AS.T
    K[ns:, :ns] = AS
    K[ns:, ns:] = -C
    rhs = np.concatenate([-g[S], rp + AN @ (g[N] / h[N])])
    d = np.sqrt(np.max(np.abs(K), axis=1))
    d[d == 0] = 1.0
    Ks = K / d[:, None] / d[None, :]
    try:
        # conditioning is poor by design near the solution; the Newton
        # decrement and residual checks decide whether the step was usable
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            sol = sla.solve(Ks, rhs / d, assume_a="sym", check_finite=False) / d
    except np.linalg.LinAlgError as exc:
        raise Diverged(f"KKT system is singular: {exc}") from exc
    nu = sol[ns:]
    dx = np.empty_like(h)
    dx[S] = sol[:ns]
    dx[N] = -(g[N] + AN.T @ nu) / h[N]
    return dx, nu


def _solve_primal(lp, pen, r, opts):
    """Feasible-start Newton on ``x`` with Armijo backtracking on ``f_r``."""
    A, b = lp.A, np.asarray(lp.b)
    c = np.asarray(lp.c)
    x = _primal_start(lp, pen, r, opts.warm_x)
    feas_tol = opts.tol * (1.0 + np.max(np.abs(b)))
    trace = []
    f_val = primal_objective(lp, pen, r, x)
    res = float(np.max(np.abs(b - A @ x)))
    for it in range(opts.max_iter + 1):
        u = -x / r
        grad = c - pen.dp(u)
        h = pen.d2p(u) / r
        rp = b - A @ x
        res = float(np.max(np.abs(rp)))
        h = np.maximum(h, CURVATURE_FLOOR * h.max())
        dx, nu = _kkt_step(A, h, grad, rp)
        dec2 = float(dx @ (h * dx))
        if opts.record_trace:
            trace.append({"iteration": it, "objective": f_val, "residual": res, "decrement2": dec2})
        if res <= feas_tol and dec2 <= opts.tol:
            # a few extra full steps are cheap and push x and lam to round-off
            for _ in range(3):
                if not _in_domain(pen, -(x + dx) / r):
                    break
                x_try = x + dx
                u = -x_try / r
                h_try = pen.d2p(u) / r
                h_try = np.maximum(h_try, CURVATURE_FLOOR * h_try.max())
                dx_try, nu_try = _kkt_step(A, h_try, c - pen.dp(u), b - A @ x_try)
                dec2_try = float(dx_try @ (h_try * dx_try))
                x, dx, nu = x_try, dx_try, nu_try
                if dec2_try > 0.5 * dec2 or dec2_try < 1e-30:
                    break
                dec2 = dec2_try
            eta = pen.dp(-x / r)
            lam = -nu
            # eta may underflow to 0 on coordinates far inside the support, so
            # x is returned as iterated rather than recovered from eta
            g_val = _dual_value(lp, pen, r, lam, eta)
            return PenalizedSolution(x, lam, eta, r, it + 1,
                                     float(np.max(np.abs(b - A @ x))),
                                     float(np.sqrt(max(dec2, 0.0))), g_val, trace)
        if it == opts.max_iter:
            break
        # cap the growth of -x/r so exponential tails cannot overflow in one step
        t = 1.0
        grow = float(np.max(-dx / r))
        if grow > 20.0:
            t = 20.0 / grow
        accepted = False
        scale = 1e-13 * (1.0 + abs(f_val))
        for _ in range(80):
            x_new = x + t * dx
            if _in_domain(pen, -x_new / r):
                f_new = primal_objective(lp, pen, r, x_new)
                if f_new <= f_val - ARMIJO * t * dec2:
                    accepted = True
                    break
                if dec2 < scale and f_new <= f_val + scale:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            raise Diverged(f"primal line search stalled at iteration {it} (decrement {dec2:.3e})")
        x, f_val = x_new, f_new
        if np.max(np.abs(x)) > X_LIMIT:
            raise Diverged(f"primal iterate exceeded {X_LIMIT:g}")
    raise Diverged(f"no convergence within {opts.max_iter} Newton iterations "
                   f"(residual {res:.3e})")


def primal_objective(lp: StandardFormLP, pen: PenaltySpec, r: float, x) -> float:
    """``f_r(x) = <c,x> + r sum_i p(-x_i/r)``."""
    x = np.asarray(x, dtype=float)
    return float(lp.c @ x + r * np.sum(pen.p(-x / r)))


def duality_gap(lp: StandardFormLP, pen: PenaltySpec, r: float, sol: PenalizedSolution) -> float:
    """``f_r(x) - g(lam)`` at the recovered primal point of ``sol``.

    ``g`` is evaluated at the stored ``eta``; for dual solves that is exactly
    ``c - A^T lam``.
    """
    return primal_objective(lp, pen, r, sol.x) - _dual_value(lp, pen, r, sol.lam, sol.eta)


def solve_path(lp: StandardFormLP, pen: PenaltySpec, r_list: Sequence[float],
               opts: SolverOptions | None = None) -> list:
    """Warm-started continuation along a strictly decreasing list of strengths."""
    r_list = [float(r) for r in r_list]
    if not r_list or any(r <= 0 for r in r_list):
        raise DomainError("penalty strengths must be positive")
    if any(b >= a for a, b in zip(r_list, r_list[1:])):
        raise DomainError("r_list must be strictly decreasing")
    opts = opts or SolverOptions()
    out = []
    warm = opts.warm_start
    warm_x = opts.warm_x
    for r in r_list:
        try:
            sol = solve_penalized(lp, pen, r, opts.with_warm_start(warm, warm_x))
        except LpDebiasError as exc:
            raise SolveFailed(f"penalized solve failed at r={r:g}: {exc}", r=r, cause=exc) from exc
        out.append(sol)
        warm, warm_x = sol.lam, sol.x
    return out
