"""
RADS error hierarchy.

Every failure the library can surface derives from RadsError. The CLI maps
`exit_code` straight onto the process exit status, and the HTTP service maps
the same classes onto status codes, so callers never need to parse messages.

Exit codes:
  0  success
  1  unexpected library error
  2  configuration error
  3  numeric divergence
  4  incompatible checkpoint
"""

from typing import Any


class RadsError(Exception):
    """Base exception for RADS errors."""

    exit_code = 1

    def __init__(self, message: str, detail: Any = None, exit_code: int | None = None):
        super().__init__(message)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class DimensionError(RadsError, ValueError):
    """Vector or matrix shapes do not agree, or an input is not finite."""


class ConfigError(RadsError):
    """A config file is missing, unparsable, or fails validation."""

    exit_code = 2

    def __init__(self, message: str, detail: Any = None, line: int | None = None):
        super().__init__(message, detail)
        self.line = line

    def __str__(self) -> str:
        base = super().__str__()
        return f"line {self.line}: {base}" if self.line is not None else base


class NumericError(RadsError, ArithmeticError):
    """A loss or gradient went NaN / infinite."""

    exit_code = 3


class DivergenceError(NumericError):
    """Training loss crossed the divergence ceiling.

    `bundle` holds the agent state at the moment of abort so the caller can
    checkpoint it.
    """

    def __init__(self, message: str, detail: Any = None, bundle: Any = None):
        super().__init__(message, detail)
        self.bundle = bundle


class CheckpointError(RadsError):
    """Checkpoint header, version or shapes do not match what was expected."""

    exit_code = 4


class CodecError(RadsError):
    """Codec cannot be fitted (rank deficiency) or loaded."""


class OracleError(RadsError):
    """The reachability oracle cannot run for this environment."""


class ConvergenceError(RadsError):
    """An iterative solver hit its iteration cap."""


class TerminalStateError(RadsError):
    """A state at the end of the horizon was stepped."""
