class AlignRecError(Exception):
    """Base class for errors raised by this package."""


class DataError(AlignRecError, ValueError):
    """Malformed or inconsistent input data."""


class ArtifactError(AlignRecError):
    """A pipeline stage could not find or read a required artifact."""


class NumericalError(AlignRecError, FloatingPointError):
    """Training produced non-finite values."""
