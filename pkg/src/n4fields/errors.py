"""Exception types shared across the package."""


class N4Error(Exception):
    """Base class for all package errors."""


class ShapeError(N4Error, ValueError):
    """Array dimensions disagree with what an operation expects."""


class CoordinateError(N4Error, IndexError):
    """A pixel coordinate lies outside the image."""


class ConfigError(N4Error, ValueError):
    """Invalid configuration value, layer stack or run config key."""


class StateError(N4Error, RuntimeError):
    """An object is used in a state that does not permit the operation."""


class TrainingError(N4Error, RuntimeError):
    """Training diverged.

    ``checkpoint`` holds the last parameter set whose loss was finite.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class FormatError(N4Error, ValueError):
    """A persisted container is malformed or has the wrong magic."""
