"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`RtprError`, so callers
(and the command line front end) can map failure classes to exit codes
without string matching.
"""


class RtprError(Exception):
    """Base class for all package errors."""


class InputError(RtprError):
    """Invalid user input: bad shapes, out-of-domain values, malformed files."""


class NumericError(RtprError):
    """Linear algebra failure: factorization breakdown or non-finite values."""


class EstimationError(RtprError):
    """An iterative solver failed to converge.

    Carries the last iterate so a caller can inspect, retry, or report it.
    """

    def __init__(self, message, *, last_beta=None, last_r=None, diagnostics=None):
        super().__init__(message)
        self.last_beta = last_beta
        self.last_r = last_r
        self.diagnostics = diagnostics


class UnsupportedModelError(RtprError):
    """The requested operation is not defined for this model configuration."""
