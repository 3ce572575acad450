"""Catalog of dual penalty functions ``p = q*`` with their conjugate derivatives.

Each penalty enters the penalized program as ``r * sum_i p(-x_i / r)``.  The
solver works with the conjugate ``q`` on ``(0, inf)``; ``q'`` is the inverse of
``p'`` and ``q'' = 1 / p''(q')``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import DomainError

EXP_CLIP = 700.0


class PenaltySpec:
    """Base class; subclasses provide the closed forms."""

    kind = "abstract"
    dom_p_upper = math.inf
    # largest argument at which p is evaluated without overflow
    max_arg = math.inf

    def p(self, x):
        raise NotImplementedError

    def dp(self, x):
        raise NotImplementedError

    def d2p(self, x):
        raise NotImplementedError

    def dq(self, y):
        """``q'(y)``, the inverse of ``p'``, for ``y > 0``."""
        raise NotImplementedError

    def q(self, y):
        """Conjugate ``q(y) = y q'(y) - p(q'(y))``."""
        u = self.dq(y)
        return np.asarray(y) * u - self.p(u)

    def d2q(self, y):
        return 1.0 / self.d2p(self.dq(y))

    def beta(self, r):
        raise NotImplementedError

    def label(self) -> str:
        return self.kind

    def __repr__(self):
        return f"{type(self).__name__}({self.label()})"

    def __eq__(self, other):
        return type(self) is type(other) and self.label() == other.label()

    def __hash__(self):
        return hash((type(self).__name__, self.label()))


class LogBarrier(PenaltySpec):
    """``p(x) = -ln(-x)`` on ``(-inf, 0)``."""

    kind = "log_barrier"
    dom_p_upper = 0.0

    def p(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x < 0, -np.log(np.where(x < 0, -x, 1.0)), np.inf)

    def dp(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(x < 0, -1.0 / np.where(x < 0, x, -1.0), np.inf)

    def d2p(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(x < 0, 1.0 / np.where(x < 0, x, 1.0) ** 2, np.inf)

    def dq(self, y):
        return -1.0 / np.asarray(y, dtype=float)

    def q(self, y):
        return -1.0 - np.log(np.asarray(y, dtype=float))

    def d2q(self, y):
        return 1.0 / np.asarray(y, dtype=float) ** 2

    def beta(self, r):
        return r


class InversePoly(PenaltySpec):
    """``p(x) = |x|^(-alpha)`` on ``(-inf, 0)``."""

    kind = "inverse_poly"
    dom_p_upper = 0.0

    def __init__(self, alpha: float = 1.0):
        if not alpha > 0:
            raise DomainError(f"inverse_poly needs alpha > 0, got {alpha}")
        self.alpha = float(alpha)

    def label(self):
        return f"inverse_poly:{self.alpha:g}"

    def p(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x < 0, np.where(x < 0, -x, 1.0) ** -self.alpha, np.inf)

    def dp(self, x):
        a = self.alpha
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x < 0, a * np.where(x < 0, -x, 1.0) ** (-a - 1), np.inf)

    def d2p(self, x):
        a = self.alpha
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x < 0, a * (a + 1) * np.where(x < 0, -x, 1.0) ** (-a - 2), np.inf)

    def dq(self, y):
        a = self.alpha
        return -(a / np.asarray(y, dtype=float)) ** (1.0 / (a + 1))

    def q(self, y):
        y = np.asarray(y, dtype=float)
        u = (self.alpha / y) ** (1.0 / (self.alpha + 1))
        return -y * u - u ** -self.alpha

    def beta(self, r):
        return r ** (self.alpha + 1)


class Exponential(PenaltySpec):
    """``p(x) = exp(x)`` on the whole line; ``q(y) = y ln y - y``."""

    kind = "exponential"
    max_arg = EXP_CLIP

    def __init__(self, kappa: float = 3.0):
        self.kappa = float(kappa)

    def label(self):
        return "exponential" if self.kappa == 3.0 else f"exponential:kappa={self.kappa:g}"

    def p(self, x):
        return np.exp(np.minimum(np.asarray(x, dtype=float), EXP_CLIP))

    dp = p
    d2p = p

    def dq(self, y):
        return np.log(np.asarray(y, dtype=float))

    def q(self, y):
        y = np.asarray(y, dtype=float)
        return y * np.log(y) - y

    def d2q(self, y):
        return 1.0 / np.asarray(y, dtype=float)

    def beta(self, r):
        return r ** self.kappa


def _softplus(x):
    return np.logaddexp(0.0, x)


class SmoothedQuadratic(PenaltySpec):
    """``p(x) = log(1 + e^x)^2``; ``q'`` has no closed form and is inverted numerically."""

    kind = "smoothed_quadratic"

    def __init__(self, kappa: float = 3.0):
        self.kappa = float(kappa)

    def label(self):
        return "smoothed_quadratic" if self.kappa == 3.0 else f"smoothed_quadratic:kappa={self.kappa:g}"

    def p(self, x):
        return _softplus(np.asarray(x, dtype=float)) ** 2

    def dp(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * _softplus(x) * expit(x)

    def d2p(self, x):
        x = np.asarray(x, dtype=float)
        s = expit(x)
        return 2.0 * s * s + 2.0 * _softplus(x) * s * (1.0 - s)

    def _log_dp(self, x):
        # log p'(x) without underflow for very negative x
        return math.log(2.0) + np.log(_softplus(x)) + np.log(expit(x))

    def dq(self, y):
        """Safeguarded Newton on ``log p'(x) = log y`` inside an expanding bracket."""
        y = np.asarray(y, dtype=float)
        scalar = y.ndim == 0
        y = np.atleast_1d(y)
        if np.any(~(y > 0)):
            raise DomainError("q' is defined on (0, inf) only")
        ly = np.log(y)
        # asymptotes: p'(x) ~ 2 e^{2x} as x -> -inf, p'(x) ~ 2x as x -> inf
        x = np.where(y < 1.0, 0.5 * (ly - math.log(2.0)), 0.5 * y)
        lo = np.minimum(x, 0.0) - 1.0
        hi = np.maximum(x, 0.0) + 1.0
        for _ in range(200):
            bad = self._log_dp(lo) > ly
            if not np.any(bad):
                break
            lo = np.where(bad, 2.0 * lo - 1.0, lo)
        for _ in range(200):
            bad = self._log_dp(hi) < ly
            if not np.any(bad):
                break
            hi = np.where(bad, 2.0 * hi + 1.0, hi)
        for _ in range(100):
            f = self._log_dp(x) - ly
            lo = np.where(f < 0, x, lo)
            hi = np.where(f > 0, x, hi)
            slope = self.d2p(x) / self.dp(x)
            step = f / slope
            x_new = x - step
            outside = ~((x_new > lo) & (x_new < hi)) | ~np.isfinite(x_new)
            x_new = np.where(outside, 0.5 * (lo + hi), x_new)
            done = np.abs(x_new - x) <= 1e-15 * (1.0 + np.abs(x))
            x = x_new
            if np.all(done):
                break
        return x[0] if scalar else x

    def beta(self, r):
        return r ** self.kappa


_ALIASES = {
    "log": "log_barrier",
    "log_barrier": "log_barrier",
    "exp": "exponential",
    "exponential": "exponential",
    "sq": "smoothed_quadratic",
    "smoothed_quadratic": "smoothed_quadratic",
    "invpoly": "inverse_poly",
    "inverse_poly": "inverse_poly",
}


def make_penalty(kind: str, alpha: float | None = None, kappa: float = 3.0) -> PenaltySpec:
    """Build a catalog penalty.

    ``kind`` accepts the long names and the CLI short forms ``log``, ``exp``,
    ``sq`` and ``invpoly:<alpha>``.
    """
    if ":" in kind:
        kind, arg = kind.split(":", 1)
        if alpha is None:
            alpha = float(arg)
    name = _ALIASES.get(kind)
    if name is None:
        raise DomainError(f"unknown penalty kind {kind!r}")
    if name == "log_barrier":
        return LogBarrier()
    if name == "inverse_poly":
        return InversePoly(1.0 if alpha is None else alpha)
    if name == "exponential":
        return Exponential(kappa)
    return SmoothedQuadratic(kappa)


def conjugate_prime(spec: PenaltySpec, y):
    """``q'(y)`` for ``y > 0``; the inverse of ``p'``."""
    arr = np.asarray(y, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("conjugate derivative is only defined for y > 0")
    return spec.dq(y)


def _fd_second(f, y):
    h = 1e-3 * y
    return (-f(y + 2 * h) + 8 * f(y + h) - 8 * f(y - h) + f(y - 2 * h)) / (12 * h)


def verify_conjugacy(spec: PenaltySpec, grid) -> float:
    """Largest error of ``p'(q'(y)) = y`` and ``p''(q'(y)) q''(y) = 1`` on ``grid``.

    ``q''`` is taken by a five-point central difference of ``q'`` so that the
    check does not reuse the closed-form second derivative.
    """
    y = np.asarray(grid, dtype=float)
    u = spec.dq(y)
    inv_err = np.max(np.abs(spec.dp(u) - y))
    curv_err = np.max(np.abs(spec.d2p(u) * _fd_second(spec.dq, y) - 1.0))
    return float(max(inv_err, curv_err))
