"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
FormatError -> 3, DeterminismError -> 4.
"""


class ConfigError(Exception):
    """Invalid or unknown configuration (bad key, bad value, bad combination)."""


class DataError(Exception):
    """Dataset-level problem: empty class, insufficient patches, misaligned ids."""


class FormatError(DataError):
    """On-disk format violation. Carries the byte offset where it was detected."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(ValueError):
    """Tensor shape disagreement between operands."""


class ParameterError(ValueError):
    """Numeric parameter outside its valid range (rate, dof, alpha, ...)."""


class StatisticsError(ValueError):
    """Statistical precondition violated (e.g. sample too small for a t-test)."""


class DeterminismError(Exception):
    """Numeric outputs differed where bit-identical results are required."""
