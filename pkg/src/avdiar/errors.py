"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class AvdiarError(Exception):
    """Base class for all package errors."""


class UsageError(AvdiarError):
    """Invalid command-line usage or configuration."""


class DataError(AvdiarError):
    """Malformed or inconsistent input data."""


class NumericalError(AvdiarError):
    """Numerical failure (NaN loss, undefined metric, degenerate geometry)."""
