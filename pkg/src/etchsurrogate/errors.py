"""Exception types shared across the toolkit.

The CLI maps these onto stable exit codes: data/format problems
(ParseError, ValidationError, ConfigError, plus OSError) exit 2,
numerical failures (ConditioningError, NonFiniteLossError) exit 3.
"""

from __future__ import annotations


class SurrogateError(Exception):
    """Base class for all toolkit errors."""


class ParseError(SurrogateError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(SurrogateError):
    """Data violates a documented invariant (geometry, positivity, duplicates)."""


class ConfigError(SurrogateError):
    """A configuration value is missing, unknown, or out of range."""


class ConditioningError(SurrogateError):
    """A dense solve hit the pivot guard; carries the estimated condition magnitude."""

    def __init__(self, message: str, condition_estimate: float | None = None):
        self.condition_estimate = condition_estimate
        if condition_estimate is not None:
            message = f"{message} (estimated condition magnitude ~{condition_estimate:.3e})"
        super().__init__(message)


class NonFiniteLossError(SurrogateError):
    """Training produced a non-finite loss or gradient; carries stage/epoch."""

    def __init__(self, message: str, stage: int | None = None, epoch: int | None = None):
        self.stage = stage
        self.epoch = epoch
        if stage is not None or epoch is not None:
            message = f"{message} (stage={stage}, epoch={epoch})"
        super().__init__(message)
