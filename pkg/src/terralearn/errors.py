"""Exceptions raised across the package."""


class TerralearnError(Exception):
    """Base class for all package errors."""


class NonFinite(TerralearnError, ArithmeticError):
    """A simulated state left the finite reals (usually an unstable candidate)."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class NonMonotoneTime(TerralearnError, ValueError):
    """Measurement timestamps did not strictly increase."""


class ConfigError(TerralearnError, ValueError):
    """Experiment configuration is unreadable or violates an invariant."""


class EmptyWindow(TerralearnError, ValueError):
    """Integration window has non-positive length."""
