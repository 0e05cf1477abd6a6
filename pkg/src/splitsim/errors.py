"""Exception hierarchy shared across the simulator.

Exit-code mapping for the CLI lives in cli.py: configuration/usage errors
exit with 2, runtime/numerics errors with 3.
"""


class SplitSimError(Exception):
    """Base class for all library errors."""


class ConfigError(SplitSimError):
    """Invalid configuration, unknown option, or incompatible combination."""


class UsageError(SplitSimError):
    """An operation was called in a state or mode it does not support."""


class ShapeError(SplitSimError):
    """Tensor or layer shapes do not compose."""


class ProtocolError(SplitSimError):
    """Malformed message exchange between client and server."""


class IngestionError(SplitSimError):
    """Dataset files missing or corrupt; message carries fetch instructions."""


class NumericsError(SplitSimError):
    """Non-finite values encountered; carries the iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
