"""Exception types raised by the mixlasso estimators and solvers."""


class MixLassoError(Exception):
    """Base class for all mixlasso-specific errors."""


class DimensionMismatch(MixLassoError):
    """Array shapes are inconsistent with the declared model dimensions."""


class NotPositiveDefinite(MixLassoError):
    """A matrix required to be positive definite is not, even after jitter."""


class InfeasibleFrozenCoefficient(MixLassoError):
    """A coefficient with infinite penalty weight has a non-zero value."""


class NonDescentDirection(MixLassoError):
    """The model decrease predicted for a line search is not negative.

    With exact arithmetic this cannot happen for directions produced by
    the coordinate model minimizer, so this error signals a bug or severe
    numerical breakdown rather than a recoverable condition.
    """


class NoPenalizedCoefficients(MixLassoError):
    """No coefficient has a finite positive penalty weight."""


class EmptyCandidateSet(MixLassoError):
    """The screening step produced no candidate random-effect columns."""
