"""Two-point extrapolation estimator and the first-order expansion oracle.

The penalized solution behaves like ``x(r, b') ~ x* + r d* + M* (b' - b)``.
``debiased_estimate`` removes the ``r d*`` term by combining two penalty
strengths; the oracle functions compute ``d*``, ``Sigma`` and ``M*`` directly so
the estimator can be checked against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (LpDebiasError, NonConvergence, SingularKkt, SolveFailed, Unbounded)
from .lp import (OPTIMAL, StandardFormLP, ZeroSet, null_space_basis, solve_lp, zero_set)
from .penalized import PenalizedSolution, SolverOptions, solve_penalized
from .penalty import PenaltySpec


@dataclass(frozen=True)
class DebiasedEstimate:
    x_hat: np.ndarray
    d_hat: np.ndarray
    r_n: float
    solutions: tuple  # (x(r_n), x(r_n / 2)) as PenalizedSolution

    def to_dict(self) -> dict:
        full, half = self.solutions
        return {
            "x_hat": self.x_hat.tolist(),
            "d_hat": self.d_hat.tolist(),
            "r_n": self.r_n,
            "solution_r": full.to_dict(),
            "solution_r_half": half.to_dict(),
        }


def two_point_extrapolate(x1, r1: float, x2, r2: float) -> np.ndarray:
    """Cancel the linear term of ``x(r) = x0 + r d + o(r)`` from two strengths."""
    if r1 == r2:
        raise ValueError("extrapolation needs two distinct strengths")
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return (r1 * x2 - r2 * x1) / (r1 - r2)


def _solve_tagged(lp, pen, r, opts, method, stage):
    try:
        return solve_penalized(lp, pen, r, opts, method=method)
    except LpDebiasError as exc:
        raise SolveFailed(f"{stage} solve failed at r={r:g}: {exc}", r=r, stage=stage,
                          cause=exc) from exc


def debiased_estimate(lp_n: StandardFormLP, pen: PenaltySpec, r_n: float,
                      opts: Optional[SolverOptions] = None, method: str = "auto",
                      warm: Optional[DebiasedEstimate] = None) -> DebiasedEstimate:
    """``x_hat = 2 x(r_n/2) - x(r_n)`` and ``d_hat = (2/r_n)(x(r_n) - x(r_n/2))``.

    ``warm`` (an estimate on a nearby right-hand side, e.g. the bootstrap
    center) seeds both solves.  Otherwise the half-strength solve is seeded
    from the full-strength one.
    """
    opts = opts or SolverOptions()
    r_n = float(r_n)
    if warm is not None:
        w_full, w_half = warm.solutions
        o_full = opts.with_warm_start(w_full.lam, w_full.x)
    else:
        o_full = opts
    full = _solve_tagged(lp_n, pen, r_n, o_full, method, "r")
    if warm is not None:
        o_half = opts.with_warm_start(w_half.lam, w_half.x)
    else:
        o_half = opts.with_warm_start(full.lam, full.x)
    half = _solve_tagged(lp_n, pen, r_n / 2.0, o_half, method, "r/2")
    x_hat = 2.0 * half.x - full.x
    d_hat = (2.0 / r_n) * (full.x - half.x)
    return DebiasedEstimate(x_hat, d_hat, r_n, (full, half))


# ---------------------------------------------------------------- oracle


@dataclass(frozen=True)
class ExpansionOracle:
    x_star: np.ndarray
    I0: ZeroSet
    d_star: np.ndarray
    sigma: np.ndarray  # diagonal of Sigma
    M_star: np.ndarray

    @property
    def Sigma(self) -> np.ndarray:
        return np.diag(self.sigma)


def _lp_optimum(lp: StandardFormLP):
    sol = solve_lp(lp)
    if sol.status != OPTIMAL:
        raise NonConvergence(f"reference LP is {sol.status}")
    return sol


def _kernel_interior_start(Z, idx, dom_upper):
    """``v`` with ``(Z v)_i > 0`` on ``idx``, via a small LP in ``v``.

    Every restricted-domain penalty in the catalog has ``dom p = (-inf, 0)``.
    """
    if not np.isfinite(dom_upper):
        return np.zeros(Z.shape[1])
    ZI = Z[idx]
    nz, ni = Z.shape[1], len(idx)
    # ZI v - s 1 - e = 0, s + u = 1, with v = v+ - v-; maximize s
    top = np.hstack([ZI, -ZI, -np.ones((ni, 1)), -np.eye(ni), np.zeros((ni, 1))])
    cap = np.zeros((1, 2 * nz + ni + 2))
    cap[0, 2 * nz] = 1.0
    cap[0, -1] = 1.0
    A = np.vstack([top, cap])
    b = np.concatenate([np.zeros(ni), [1.0]])
    c = np.zeros(2 * nz + ni + 2)
    c[2 * nz] = -1.0
    sol = solve_lp(StandardFormLP(A, b, c, require_full_rank=False))
    if sol.status != OPTIMAL or sol.x[2 * nz] <= 1e-9:
        raise Unbounded("the kernel of A has no direction that is positive on the zero set, "
                        "so the bias program is infeasible for this penalty")
    return sol.x[:nz] - sol.x[nz:2 * nz]


def oracle_d_star(lp: StandardFormLP, pen: PenaltySpec, zeros: Optional[ZeroSet] = None,
                  tol: float = 1e-11, max_iter: int = 200) -> np.ndarray:
    """Minimize ``<c,d> + sum_{i in I0} p(-d_i)`` over ``Ad = 0``.

    Newton in null-space coordinates ``d = Z v``.  The reduced objective is
    bounded below exactly when the LP solution is unique; a runaway iterate is
    reported as ``Unbounded``.
    """
    if zeros is None:
        zeros = zero_set(_lp_optimum(lp))
    idx = np.asarray(zeros.indices, dtype=int)
    c = np.asarray(lp.c, dtype=float)
    Z = null_space_basis(lp.dense_A())
    if Z.shape[1] == 0:
        return np.zeros(lp.m)
    ZI = Z[idx]
    cz = Z.T @ c

    def obj(v):
        return float(cz @ v + np.sum(pen.p(-(ZI @ v))))

    def inside(v):
        u = -(ZI @ v)
        return bool(np.all(u < pen.dom_p_upper) and np.all(u <= pen.max_arg))

    v = _kernel_interior_start(Z, idx, pen.dom_p_upper)
    f = obj(v)
    for _ in range(max_iter):
        u = -(ZI @ v)
        grad = cz - ZI.T @ pen.dp(u)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol:
            return Z @ v
        H = (ZI.T * pen.d2p(u)) @ ZI
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise Unbounded("reduced Hessian is singular: the bias program has a flat "
                            "direction (LP solution not unique)") from exc
        slope = float(grad @ step)
        if not slope < 0:
            raise NonConvergence(f"Newton direction is not a descent direction (slope {slope:.3e})")
        t = 1.0
        for _ in range(80):
            v_new = v + t * step
            if inside(v_new):
                f_new = obj(v_new)
                if f_new <= f + 1e-4 * t * slope:
                    break
                if -slope < 1e-15 * (1 + abs(f)) and f_new <= f + 1e-15 * (1 + abs(f)):
                    break
            t *= 0.5
        else:
            raise NonConvergence(f"line search failed (gradient {gnorm:.3e})")
        v, f = v_new, f_new
        if np.max(np.abs(v)) > 1e8:
            raise Unbounded("bias program iterate diverged; the reduced objective is unbounded")
    raise NonConvergence(f"bias program did not reach stationarity within {max_iter} iterations")


def oracle_sigma(pen: PenaltySpec, d_star, zeros: ZeroSet) -> np.ndarray:
    """Diagonal of ``Sigma``: ``p''(-d*_i)`` on the zero set, 0 elsewhere."""
    d_star = np.asarray(d_star, dtype=float)
    sigma = np.zeros_like(d_star)
    idx = np.asarray(zeros.indices, dtype=int)
    sigma[idx] = pen.d2p(-d_star[idx])
    return sigma


def oracle_M_star(A, Sigma, rel_floor: float = 1e-12) -> np.ndarray:
    """Sigma-weighted least-norm right inverse of ``A``.

    Column ``j`` minimizes ``x^T Sigma x`` subject to ``Ax = e_j``; solved as
    ``x_p + Z v`` with ``x_p = A^T (A A^T)^{-1} e_j``.
    ``Sigma`` may be a diagonal matrix or its diagonal.
    """
    A = np.asarray(A.toarray() if hasattr(A, "toarray") else A, dtype=float)
    S = np.asarray(Sigma, dtype=float)
    sigma = np.diag(S) if S.ndim == 2 else S
    k = A.shape[0]
    Xp = A.T @ np.linalg.solve(A @ A.T, np.eye(k))
    Z = null_space_basis(A)
    if Z.shape[1] == 0:
        return Xp
    K = (Z.T * sigma) @ Z
    ev = np.linalg.eigvalsh(K)
    if ev[0] <= rel_floor * max(ev[-1], 1.0):
        raise SingularKkt(f"Z^T Sigma Z is singular (smallest eigenvalue {ev[0]:.3e}); "
                          "the LP solution is degenerate or not unique")
    V = -np.linalg.solve(K, (Z.T * sigma) @ Xp)
    return Xp + Z @ V


def build_oracle(lp: StandardFormLP, pen: PenaltySpec, zero_tol: float = 1e-9) -> ExpansionOracle:
    sol = _lp_optimum(lp)
    zeros = zero_set(sol, zero_tol)
    d_star = oracle_d_star(lp, pen, zeros)
    sigma = oracle_sigma(pen, d_star, zeros)
    M = oracle_M_star(lp.dense_A(), sigma)
    return ExpansionOracle(sol.x.copy(), zeros, d_star, sigma, M)


def expansion_residual(lp: StandardFormLP, pen: PenaltySpec, r: float, b_prime,
                       oracle: ExpansionOracle, opts: Optional[SolverOptions] = None,
                       method: str = "auto") -> np.ndarray:
    """``x(r, b') - x* - r d* - M* (b' - b)``."""
    b_prime = np.asarray(b_prime, dtype=float)
    sol = solve_penalized(lp.with_b(b_prime), pen, r, opts, method=method)
    return sol.x - oracle.x_star - r * oracle.d_star - oracle.M_star @ (b_prime - np.asarray(lp.b))
