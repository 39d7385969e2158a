"""Exception hierarchy shared by all iuqlab modules.

The harness maps :class:`ValidationError` to exit status 2 and every other
:class:`IUQError` to exit status 3.
"""


class IUQError(Exception):
    """Base class for every error raised by iuqlab."""


class ValidationError(IUQError, ValueError):
    """Rejected input: wrong dimensions, violated preconditions, bad config."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ModelFailure(IUQError):
    """A computer-model evaluation raised or produced non-finite output."""

    def __init__(self, message, x=None, theta=None, parameter=None):
        self.x = x
        self.theta = theta
        self.parameter = parameter
        super().__init__(message)


class NumericalError(IUQError, ArithmeticError):
    """A numerical method failed (divergence, singular system, ...)."""


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, message, min_eigenvalue=None):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(message)


class CollinearityError(NumericalError):
    """Two sensitivity columns are (nearly) collinear; the bias is not identifiable."""

    def __init__(self, message, pair=None):
        self.pair = pair
        super().__init__(message)


class BracketError(NumericalError):
    """A requested level is not attained by a monotone curve."""

    def __init__(self, message, attainable=None):
        self.attainable = attainable
        super().__init__(message)


class SurrogateError(NumericalError):
    """A surrogate failed to fit or failed its validation check."""
