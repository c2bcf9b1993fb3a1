"""Exception types raised across the package."""

from sklearn.exceptions import NotFittedError  # noqa: F401  re-exported


class CliqueLoopError(Exception):
    """Base class for all package errors."""


class EmptyInputError(CliqueLoopError, ValueError):
    pass


class DimensionMismatchError(CliqueLoopError, ValueError):
    pass


class NonFiniteError(CliqueLoopError, ValueError):
    pass


class MagicMismatchError(CliqueLoopError, ValueError):
    """A binary file does not start with the expected four-byte tag."""


class MissingArtifactError(CliqueLoopError, FileNotFoundError):
    pass


class UnknownKeyframeError(CliqueLoopError, KeyError):
    pass


class InsufficientMatchesError(CliqueLoopError, ValueError):
    pass


class AmbiguousPoseError(CliqueLoopError, ValueError):
    """No essential-matrix decomposition puts most points in front of both cameras."""


class UndefinedMetricError(CliqueLoopError, ValueError):
    pass


class TrainingError(CliqueLoopError, RuntimeError):
    pass


class ConfigError(CliqueLoopError, ValueError):
    pass
