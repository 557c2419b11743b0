"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class GunetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GunetError):
    """An operation received operands with incompatible shapes."""


class GraphError(GunetError):
    """A road graph or resampling structure could not be built."""


class DataError(GunetError):
    """A file or byte stream violates one of the on-disk formats."""


class CheckpointError(DataError):
    """A parameter checkpoint is malformed or inconsistent."""


class UsageError(GunetError):
    """Command-line arguments or configuration values are invalid."""


class NumericError(GunetError):
    """A numeric invariant failed at runtime (NaN loss, bad gradient)."""
