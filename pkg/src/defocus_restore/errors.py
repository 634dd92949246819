"""Exception hierarchy.

The CLI maps these onto exit codes: argument problems exit 2, data and
format problems exit 3, numeric divergence exits 4.
"""


class DefocusRestoreError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(DefocusRestoreError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InputError(DefocusRestoreError, ValueError):
    """Malformed or insufficient input data."""


class DimensionError(DefocusRestoreError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class KernelSizeError(DefocusRestoreError):
    """A PSF kernel would exceed the configured radius cap."""


class FormatError(DefocusRestoreError):
    """An on-disk artifact could not be parsed."""

    def __init__(self, message, offset=None):
        self.detail = message
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptionError(FormatError):
    """A model manifest and its parameter blob disagree."""


class ConfigError(DefocusRestoreError, ValueError):
    """Unknown or invalid configuration key."""


class StateError(DefocusRestoreError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class DivergenceError(DefocusRestoreError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class CoverageError(DefocusRestoreError, RuntimeError):
    """Some output pixel received no patch weight."""
