"""Exception taxonomy shared by the library and the CLI.

Each top-level error class carries the process exit code the CLI maps it
to; subclasses refine the message, not the code.
"""


class VaricurateError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class DataError(VaricurateError):
    """Input data violates a documented contract (values, alignment, ids)."""

    exit_code = 2


class AlignmentError(DataError):
    """Two inputs that must share sample ids do not."""


class DegenerateEmbeddingError(DataError):
    """An embedding row is zero (or numerically indistinguishable from zero)."""


class DegenerateMeanError(DataError):
    """A per-identity mean cancelled to (near) zero and cannot be normalized."""


class ShapeError(DataError):
    """Array dimensions do not match."""


class ParameterError(VaricurateError):
    """A parameter is out of its documented range."""

    exit_code = 3


class PreconditionError(ParameterError):
    """A caller-side precondition (e.g. unit-normalized input) is not met."""


class FormatError(VaricurateError):
    """A file does not conform to its documented format."""

    exit_code = 4


class NumericError(VaricurateError):
    """A numerical routine failed or hit a configuration it cannot handle."""

    exit_code = 5
