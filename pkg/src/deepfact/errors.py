"""Exception types shared across the package."""

from __future__ import annotations


class DeepFactError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(DeepFactError, ValueError):
    """Matrices, chains or observation sets disagree on their dimension."""


class EmptyObservationError(DeepFactError, ValueError):
    """An operation that needs at least one observation received none."""


class StepCollapseError(DeepFactError, RuntimeError):
    """Adaptive halving drove the integration step below the floor.

    The partially integrated trajectory is kept on ``trajectory``.
    """

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class BracketError(DeepFactError, RuntimeError):
    """A monotone root bracket could not be established or verified."""


class DegenerateBlockError(DeepFactError, ValueError):
    """A single observed block covers the whole matrix."""


class PretrainUndefinedError(DeepFactError, ValueError):
    """The closed-form pre-training endpoint does not exist for this input."""


class ConfigError(DeepFactError, ValueError):
    """An experiment configuration failed validation."""
