"""Exception and warning classes shared across the package.

Hard failures derive from :class:`DplsError` (and ``ValueError`` where the
cause is bad input).  Conditions the library recovers from -- rank
deficiency, pseudo-inverse fallbacks, clipped covariance -- are reported as
warnings deriving from :class:`DplsWarning` and recorded as flags on the
returned object.
"""


class DplsError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DplsError, ValueError):
    pass


class MissingColumn(DplsError, ValueError):
    pass


class EmptyPanel(DplsError, ValueError):
    pass


class NonNumericCell(DplsError, ValueError):
    pass


class ZeroVarianceColumn(DplsError, ValueError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"column {index} has zero sample variance")


class InvalidConfig(DplsError, ValueError):
    pass


class InvalidLink(InvalidConfig):
    pass


class GridEmpty(DplsError, ValueError):
    pass


class NonFiniteActivation(DplsError, FloatingPointError):
    pass


class NonFiniteLoss(DplsError, FloatingPointError):
    """Training diverged.  ``net`` and ``loss_curve`` hold the last finite state."""

    def __init__(self, message, net=None, loss_curve=None):
        super().__init__(message)
        self.net = net
        self.loss_curve = loss_curve


class TooFewPeriods(DplsError, ValueError):
    pass


class TooFewObservations(DplsError, ValueError):
    pass


class InsufficientAssets(DplsError, ValueError):
    def __init__(self, period, available: int, requested: int):
        self.period = period
        super().__init__(
            f"period {period!r} has {available} assets, portfolio needs {requested}"
        )


class ZeroVolatility(DplsError, ZeroDivisionError):
    pass


# -- recoverable conditions ----------------------------------------------


class DplsWarning(UserWarning):
    pass


class RankDeficient(DplsWarning):
    pass


class SingularKrylov(DplsWarning):
    pass


class DegenerateEigenvalue(DplsWarning):
    pass


class NonConvergent(DplsWarning):
    pass


class NonConvergence(DplsWarning):
    pass


class SingularDesign(DplsWarning):
    pass


class NonPsdInput(DplsWarning):
    pass
