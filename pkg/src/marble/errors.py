"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, FormatError -> 3,
NumericError -> 4. Everything else is an ordinary bug.
"""


class MarbleError(Exception):
    """Base class for all package errors."""


class DimensionError(MarbleError):
    """Shape or index mismatch in a tensor/bag operation."""


class ConfigError(MarbleError):
    """Invalid configuration value, argument, or run setup."""


class FormatError(MarbleError):
    """Malformed file: bag, manifest, or checkpoint."""


class DomainError(MarbleError):
    """Input outside the mathematical domain of an operation."""


class NumericError(MarbleError):
    """Non-finite value produced by a primitive, or numeric breakdown."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite result in op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UndefinedMetricError(MarbleError):
    """Metric has no defined value on this input (e.g. single-class AUC)."""
