"""Exception taxonomy shared across the package.

Each class carries the process exit code the command-line interface maps it
to; see README for the documented codes.
"""


class EmbalignError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(EmbalignError):
    """Invalid configuration: bad hyperparameters, inconsistent dimensions."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor operation called with incompatible shapes."""


class DataError(EmbalignError):
    """Invalid or empty data: bad token ids, mismatched label lengths."""

    exit_code = 3


class DependencyError(EmbalignError):
    """A required artifact (e.g. an upstream checkpoint) is missing."""

    exit_code = 4


class NumericsError(EmbalignError):
    """Numeric failure: divergence to NaN/Inf, undefined loss."""

    exit_code = 5


class FrozenContractError(EmbalignError):
    """A parameter outside the declared trainable set was modified."""

    exit_code = 6


class StaleGradientError(EmbalignError):
    """Optimizer step requested before gradients were populated (debug mode)."""

    exit_code = 5
