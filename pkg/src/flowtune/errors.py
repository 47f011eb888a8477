"""Exception taxonomy shared across the package.

Every failure mode that callers are expected to branch on gets its own type;
the CLI maps them to exit codes (config errors -> 2, numerical aborts -> 3).
"""

from __future__ import annotations


class FlowtuneError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FlowtuneError):
    """Invalid experiment configuration.

    ``field`` carries the dotted path of the offending entry so error reports
    can name it precisely.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class DimensionError(FlowtuneError):
    """Shape mismatch in a tensor operation; names both shapes and the op."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{op}: expected shape {self.expected}, got {self.actual}")


class ContractViolation(FlowtuneError):
    """A documented pre/postcondition of an operation was violated."""


class EstimatorConstraintError(FlowtuneError):
    """An estimator was asked to run on inputs its formula cannot support."""


class NumericalAbortError(FlowtuneError):
    """Non-finite values encountered; training must stop, not limp on.

    ``diagnostics`` is a small JSON-able dict describing where the values
    went bad (op/parameter name, step, magnitudes).
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class UnsupportedOracleError(FlowtuneError):
    """Requested a closed-form oracle outside the family that has one."""
