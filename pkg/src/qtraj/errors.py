"""Exception hierarchy shared by every qtraj module."""


class QTrajError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(QTrajError, ValueError):
    """Matrices or vectors with incompatible shapes were combined."""


class ZeroBranch(QTrajError, ArithmeticError):
    """A Kraus branch annihilated the state (``||v x||^2`` below the floor)."""


class NonUniqueFixedPoint(QTrajError):
    """The channel has more than one fixed density matrix."""


class PreconditionError(QTrajError, ValueError):
    """An operation was called without its required precondition."""


class NoConvergence(QTrajError, RuntimeError):
    """An iterative construction failed to converge within its budget."""


class SizeLimit(QTrajError, ValueError):
    """Input exceeds the configured solver size limit."""


class DegenerateVariance(QTrajError, ValueError):
    """The asymptotic variance is zero, so a normalized statistic is undefined."""


class InsufficientPoints(QTrajError, ValueError):
    """Too few data points remain for a regression."""
