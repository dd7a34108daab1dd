"""
Exception hierarchy shared by every AUIF module.

Callers can catch ``AUIFError`` for anything raised on purpose by the
package; the CLI turns it into a one-line error and a nonzero exit code.
"""
from typing import Optional


class AUIFError(Exception):
    """Base class for all errors raised deliberately by the package."""


class InvalidInputError(AUIFError, ValueError):
    """An argument violates an operation's precondition (shape, range, dtype)."""


class StepSizeError(AUIFError):
    """An iterative solver diverged for the requested step size."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class CheckpointFormatError(AUIFError):
    """A checkpoint file is malformed; ``offset`` is where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteLossError(AUIFError):
    """Training produced a NaN/Inf loss; a diagnostic snapshot was written."""

    def __init__(self, message: str, snapshot_path: Optional[str] = None):
        if snapshot_path:
            message = f"{message}; snapshot saved to {snapshot_path}"
        super().__init__(message)
        self.snapshot_path = snapshot_path


class DatasetError(AUIFError):
    """The dataset is empty or cannot be paired."""


class ImageIOError(AUIFError, OSError):
    """An image could not be read or written."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


class ConfigError(AUIFError):
    """A run configuration file is malformed or holds unknown keys."""
