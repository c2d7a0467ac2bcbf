"""Exception hierarchy shared across the package."""


class RaysplatError(Exception):
    """Base class for all package errors."""


class DataError(RaysplatError):
    """Input data is malformed or inconsistent (CLI exit code 3)."""


class NumericalError(RaysplatError):
    """A computation produced non-finite or degenerate values (CLI exit code 4)."""


class NonPositiveDepth(NumericalError):
    pass


class NonPositiveDistance(NumericalError):
    pass


class ParallelRays(NumericalError):
    pass


class ZeroQuaternion(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class MissingContributorRecord(RaysplatError):
    pass


class ShapeMismatch(DataError):
    pass


class TooSmall(DataError):
    pass


class ParseError(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class UnknownViewId(DataError):
    pass


class EmptyMatchSet(DataError):
    pass


class DegenerateGeometry(DataError):
    pass
