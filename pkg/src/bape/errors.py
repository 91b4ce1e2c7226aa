"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates an operation's preconditions."""


class NumericalFailure(RuntimeError):
    """Raised when a factorization fails even after the maximum jitter."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class DegenerateDensity(ValueError):
    """Raised when a density cannot be normalized (all mass is zero)."""


class OracleFailure(RuntimeError):
    """Raised when an expensive oracle cannot produce a value.

    ``raw`` keeps the offending response line, if there was one.
    """

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


class EstimationFailure(RuntimeError):
    """Raised when a sample-based estimate cannot be formed."""
