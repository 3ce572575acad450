"""Exception hierarchy shared by every module of the package."""


class LpDebiasError(Exception):
    """Base class for all errors raised by lp_debias."""


class DomainError(LpDebiasError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class RankDeficient(LpDebiasError, ValueError):
    """A constraint matrix does not have full row rank."""


class NumericalBreakdown(LpDebiasError):
    """A pivot fell below the stability floor of the simplex method."""


class AmbiguousZero(LpDebiasError):
    """An entry sits between the zero tolerance and ten times that tolerance."""


class DualInfeasibleStart(LpDebiasError):
    """No strictly dual-feasible multiplier exists for the penalized dual."""


class Diverged(LpDebiasError):
    """An iterative method exceeded its budget or produced runaway values."""


class DomainViolation(LpDebiasError):
    """A line search could not keep iterates inside an open domain."""


class Unbounded(LpDebiasError):
    """A minimization has no finite minimizer."""


class NonConvergence(LpDebiasError):
    """An iterative method stopped before meeting its tolerance."""


class SingularKkt(LpDebiasError):
    """The reduced KKT matrix of the sensitivity program is singular."""


class ReplicateFailure(LpDebiasError):
    """Too many bootstrap or Monte-Carlo replicates failed."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class DegenerateEnsemble(LpDebiasError):
    """All replicates coincide, so quantiles collapse to a point mass."""


class UnbalancedDemand(LpDebiasError, ValueError):
    """Net demands of a flow problem do not sum to zero."""


class ImageMismatch(LpDebiasError, ValueError):
    """Two images that must share a grid have different shapes."""


class UnsupportedPgm(LpDebiasError, ValueError):
    """A PGM file uses a variant the reader does not handle."""


class SolveFailed(LpDebiasError):
    """Wraps a solver error with the context in which it occurred."""

    def __init__(self, message, *, r=None, stage=None, cause=None):
        super().__init__(message)
        self.r = r
        self.stage = stage
        self.cause = cause
