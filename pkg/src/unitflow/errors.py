"""Exception taxonomy shared across the package."""


class UnitflowError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(UnitflowError, ValueError):
    """Caller violated a documented precondition (shape, range, or type)."""


class EmptyAfterTrim(UnitflowError):
    """Silence trimming removed every frame."""


class DegenerateData(UnitflowError):
    """Input admits no meaningful solution (e.g. all feature rows identical)."""


class LengthOverflow(UnitflowError):
    """A sequence does not fit inside the requested frame budget."""


class DivergenceError(UnitflowError):
    """Training produced a non-finite loss; optimizer state was not advanced."""


class IncompatibleCheckpoint(UnitflowError):
    """Checkpoint architecture or stage does not match the requested run."""


class NumericalError(UnitflowError):
    """A numeric routine produced non-finite intermediate values."""


class IoError(UnitflowError):
    """A file is missing, malformed, or would be overwritten without --force."""
