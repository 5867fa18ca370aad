"""Semantic exception hierarchy for mfvr.

Every failure mode that callers may want to handle separately gets its own
class; all of them derive from :class:`MFVRError`.
"""


class MFVRError(Exception):
    """Base class for all mfvr errors."""


class DimensionMismatchError(MFVRError, ValueError):
    """A point or matrix does not match the declared dimension."""


class UnsupportedPointError(MFVRError, ValueError):
    """A density ratio was requested at a point where the denominator is zero."""


class IntractableTargetError(MFVRError, RuntimeError):
    """Rejection sampling stalled: too many proposals per accepted sample."""


class DegenerateResponsibilityError(MFVRError, FloatingPointError):
    """All mixture components underflowed to zero at some sample."""


class EMDegenerateError(MFVRError, RuntimeError):
    """An EM update produced a covariance that is not positive definite."""


class CENotConvergedError(MFVRError, RuntimeError):
    """The cross-entropy loop hit the level limit before reaching the target.

    The last :class:`~mfvr.cross_entropy.CEState` is attached as ``state``.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class DegenerateCovarianceError(MFVRError, ValueError):
    """An estimated covariance system is singular (e.g. a constant control)."""


class SingularSystemError(MFVRError, ValueError):
    """A closed-form weight system is numerically singular."""


class InvalidRatioError(MFVRError, ValueError):
    """A sample-count ratio violates its constraint (r > 1, or equal r)."""


class BoundViolatedError(MFVRError, ValueError):
    """An ensemble-count precondition (K > M + 2) is violated."""


class InfeasibleTargetError(MFVRError, ValueError):
    """No ensemble count can reach the requested variance ratio (y + R^2 <= 1)."""


class UndefinedRangeError(MFVRError, ValueError):
    """The control has zero variance; no weight range exists."""


class InsufficientTailMassError(MFVRError, ValueError):
    """Too few reference samples in the tail to calibrate a threshold."""


class AssemblyError(MFVRError, RuntimeError):
    """An assembled stiffness matrix is not positive definite."""
