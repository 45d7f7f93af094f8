"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class PopgridError(Exception):
    """Base class for all errors raised by popgrid."""


class DataError(PopgridError, ValueError):
    """Input data violates a documented contract (format, alignment, ids)."""


class GridPackError(DataError):
    """A GridPack file could not be decoded."""


class NumericalError(PopgridError, ArithmeticError):
    """A computation produced a non-finite value."""
