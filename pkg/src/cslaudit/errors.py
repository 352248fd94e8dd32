"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class AuditToolError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AuditToolError):
    """Invalid configuration: bad grammar, out-of-range fractions, bad dims."""


class CoverageError(ConfigError):
    """A class required by the training set never appears in the labels."""


class DataError(AuditToolError):
    """Malformed or inconsistent data files / inputs."""


class ParseError(DataError):
    """File could not be parsed; carries a line number where known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """Parsed data violates structural invariants (e.g. length mismatches)."""


class StoreError(DataError):
    """Checkpoint store is corrupt, truncated, or has a bad magic/version."""


class FingerprintError(DataError):
    """Checkpoint store and audited dataset do not belong together."""


class SequenceTooShortError(DataError):
    """Sequence too short (or too few label runs) for the requested corruption."""


class MetricUndefinedError(DataError):
    """Metric is undefined for the given input (e.g. single-class AUC)."""


class NumericError(AuditToolError):
    """Non-finite values encountered where finite numerics are required."""
