"""Exception hierarchy for variance components estimation."""


class VarCompError(Exception):
    """Base class for all errors raised by :mod:`varcomp`."""


class DimensionMismatch(VarCompError, ValueError):
    pass


class NotPositiveDefinite(VarCompError, ValueError):
    """A matrix that must be positive definite failed factorization."""


class IndefiniteInput(VarCompError, ValueError):
    """A matrix that must be positive semidefinite has a negative eigenvalue."""


class FullRowRank(VarCompError, ValueError):
    """The design has rank n, so no REML contrast exists."""


class SingularOmega(NotPositiveDefinite):
    """The assembled covariance left the positive definite cone."""


class RankDeficientDesign(VarCompError, ValueError):
    pass


class ZeroDenominator(VarCompError, ArithmeticError):
    """tr(inv(Omega) V_i) is not strictly positive."""


class ZeroRank(VarCompError, ValueError):
    pass


class LineSearchFailed(VarCompError, RuntimeError):
    pass


class BoundaryPoint(VarCompError, ValueError):
    pass


class NoPositiveRoot(VarCompError, ArithmeticError):
    pass


class QuarticSolverFailed(VarCompError, RuntimeError):
    pass
