"""Error hierarchy shared by every cassi-tools module."""

from typing import Optional


class CassiError(Exception):
    """Base class for all errors raised by cassi-tools."""


class DimensionError(CassiError, ValueError):
    """Extents disagree; the message names the offending axis."""

    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


class ConfigError(CassiError, ValueError):
    """Invalid configuration value or incompatible settings."""


class UsageError(CassiError, ValueError):
    """An API was called in a way it does not support."""


class DomainError(CassiError, ValueError):
    """Input values lie outside the mathematical domain of an operation."""


class ManifestError(ConfigError):
    """A dataset manifest is malformed or references missing files."""


class FormatError(CassiError, ValueError):
    """A container file could not be parsed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SingularityError(CassiError, ArithmeticError):
    """A projection divides by zero where the residual is nonzero."""


class NonFiniteError(CassiError, ArithmeticError):
    """NaN or Inf appeared in a computation that should stay finite."""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class StageError(CassiError):
    """Wraps a failure raised inside one unfolding stage."""

    def __init__(self, stage: int, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause
