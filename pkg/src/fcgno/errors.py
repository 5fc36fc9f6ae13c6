"""Exception hierarchy shared by every module."""


class FcgnoError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(FcgnoError, ValueError):
    pass


class NotPositiveDefinite(FcgnoError):
    pass


class DidNotConverge(FcgnoError):
    pass


class NonPositiveCoefficient(FcgnoError, ValueError):
    pass


class ResampleLimitExceeded(FcgnoError):
    pass


class BreakdownZeroCurvature(FcgnoError):
    """Raised when a search direction has nonpositive curvature <p, Ap>."""


class NonFinitePreconditioner(FcgnoError):
    pass


class ZeroDiagonal(FcgnoError):
    pass


class ZeroPivot(FcgnoError):
    pass


class NonFiniteParameters(FcgnoError):
    pass


class NonFiniteGradient(FcgnoError):
    pass


class DegenerateError(FcgnoError):
    """A training sample whose error has zero energy norm."""


class ConfigError(FcgnoError, ValueError):
    pass


class FormatError(FcgnoError, ValueError):
    """Malformed FCGT tensor file or dataset directory."""
