"""Exception types shared across the library."""


class OrsdError(Exception):
    """Base class for library-specific failures."""


class DegenerateBoxError(OrsdError, ValueError):
    """A box with (near-)zero area was passed where positive area is required."""


class DataFormatError(OrsdError, ValueError):
    """An input file does not conform to one of the documented formats."""


class NumericCheckError(OrsdError, RuntimeError):
    """A numeric self-check (gradient check, invariant sweep, ...) failed."""


class TrainingDivergedError(OrsdError, RuntimeError):
    """The training loss became non-finite."""
