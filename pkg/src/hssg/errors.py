"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: ConfigError -> 2, DataError -> 3,
NumericError (and subclasses) -> 4.
"""


class HssgError(Exception):
    """Base class for all package errors."""


class ConfigError(HssgError):
    """Invalid settings: unknown keys, out-of-range parameters, mode mismatches."""


class DataError(HssgError):
    """Unreadable or inconsistent input data (files, point clouds, tables)."""


class GenerationError(DataError):
    """Synthetic scene generation could not satisfy its constraints."""


class NumericError(HssgError):
    """Numeric contract violations during computation."""


class DimensionError(NumericError):
    """Tensor shape mismatch."""


class DomainError(NumericError):
    """Input outside an operation's mathematical domain."""


class IndexRangeError(NumericError):
    """Segment or gather index out of range."""


class ContractError(NumericError):
    """An operation was called in a way that violates its contract."""
