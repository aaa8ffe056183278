"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ``ConfigError`` is a usage error,
``DataError`` a data/validation error and ``NumericalError`` a numerical
failure.
"""


class ConfigError(ValueError):
    """Invalid configuration or command-line usage."""


class DataError(ValueError):
    """Input data violates a documented invariant."""


class NumericalError(RuntimeError):
    """A numerical routine failed (singular system, non-absorbing chain...)."""
