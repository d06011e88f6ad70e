"""Exception hierarchy, shared by every module.

All failures raised on purpose by this package derive from PmilError so
callers (and the CLI exit-code mapping) can tell expected failures apart
from genuine bugs.
"""


class PmilError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PmilError):
    """A value violates a documented invariant (bad range, empty bag, ...)."""


class DimensionMismatchError(PmilError):
    """Two objects that must share a dimension (features, video size) do not."""


class MissingGeometryError(PmilError):
    """An operation needs tube geometry that the bag or instance lacks."""


class DataFormatError(PmilError):
    """A file on disk cannot be parsed into a valid object."""


class NumericalError(PmilError):
    """Training or evaluation produced a non-finite intermediate value."""
