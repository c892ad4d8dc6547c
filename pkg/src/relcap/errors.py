"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: UsageError -> 1, DataFormatError -> 2,
NumericError -> 3. Everything here derives from RelcapError so callers can
catch package failures in one clause.
"""


class RelcapError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(RelcapError):
    """Bad arguments, bad configuration, or misuse of an API contract."""

    exit_code = 1


class ConfigError(UsageError):
    """Invalid or inconsistent configuration values."""


class DimensionError(UsageError):
    """Tensor shapes do not satisfy an operation's contract."""


class DataFormatError(RelcapError):
    """A file on disk does not match its documented format."""

    exit_code = 2


class NumericError(RelcapError):
    """Non-finite values or other numeric failure during computation."""

    exit_code = 3


class DegenerateVarianceError(RelcapError):
    """Paired test invoked on differences with zero variance."""

    exit_code = 1
