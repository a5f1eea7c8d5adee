"""Exception hierarchy shared by all modules."""


class CvseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CvseError):
    """Operands have incompatible or invalid dimensions."""


class UsageError(CvseError):
    """An operation was called with arguments that violate its contract."""


class DataError(CvseError):
    """A file, record, or lookup is malformed, missing, or inconsistent."""


class NumericError(CvseError):
    """A computation produced or received non-finite values."""
