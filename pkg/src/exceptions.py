"""
Exception hierarchy for the forecasting pipeline.

Validation problems (bad rows, bad shapes, bad config) subclass ValueError so
callers that only know the standard library still catch them. The CLI maps
every ValueError to exit code 1 and anything else to exit code 2.
"""

from __future__ import annotations

from typing import Optional


class QuakeGridError(Exception):
    """Base class for all pipeline errors."""


# =============================================================================
# VALIDATION ERRORS
# =============================================================================

class CatalogParseError(QuakeGridError, ValueError):
    """A catalog row failed validation."""

    def __init__(self, line: int, field: str, reason: str):
        self.line = line
        self.field = field
        self.reason = reason
        super().__init__(f"line {line}, field '{field}': {reason}")


class EmptyCatalogError(QuakeGridError, ValueError):
    """The catalog holds no events."""

    def __init__(self, message: str = "empty catalog"):
        super().__init__(message)


class ShapeMismatchError(QuakeGridError, ValueError):
    """Two arrays that must agree in shape do not."""


class NonFiniteError(QuakeGridError, ValueError):
    """A NaN or Inf appeared where only finite values are allowed."""


class SplitError(QuakeGridError, ValueError):
    """A chronological split cannot satisfy its purge gaps."""


class ConfigError(QuakeGridError, ValueError):
    """Unknown or malformed configuration key."""


class GridFormatError(QuakeGridError, ValueError):
    """A binary grid file is truncated or carries the wrong magic."""


class InsufficientHistoryError(QuakeGridError, ValueError):
    """A reference day lacks the input window it needs."""

    def __init__(self, day, needed: int):
        self.day = day
        self.needed = needed
        super().__init__(f"reference day {day} needs {needed} days of history")


# =============================================================================
# RUNTIME ERRORS
# =============================================================================

class MissingCacheError(QuakeGridError, RuntimeError):
    """A backward pass was requested without a matching forward pass."""


class NonDeterministicClosureError(QuakeGridError, RuntimeError):
    """A loss closure returned different values for identical parameters."""


class DivergenceError(QuakeGridError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, loss: Optional[float] = None):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
