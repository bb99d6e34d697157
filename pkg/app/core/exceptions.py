"""Exception hierarchy shared by services and the command line.

Each error carries the process exit code the CLI reports for it:
2 for bad data or configuration, 3 for numeric or capacity failures.
"""


class RLCMError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class DataError(RLCMError, ValueError):
    """Input data is malformed (non-binary cells, empty files, bad shapes)."""


class DimensionError(DataError):
    """Array dimensions do not agree."""


class RestrictionError(DataError):
    """Response probabilities violate 0 < psi < theta < 1."""


class ConfigError(RLCMError, ValueError):
    """Run configuration is invalid or contains unknown keys."""


class IdentifiabilityError(RLCMError, ValueError):
    """A Q matrix cannot be placed in the identifiable constraint set."""


class CapacityError(RLCMError):
    """A requested computation exceeds a configured capacity limit."""

    exit_code = 3


class NumericError(RLCMError, ArithmeticError):
    """A numeric routine failed to produce a finite result."""

    exit_code = 3


class TruncationError(NumericError):
    """Truncated distribution has (numerically) no mass on the interval."""


class StickSamplingError(NumericError):
    """Inactive stick sampling failed after bounded retries."""
