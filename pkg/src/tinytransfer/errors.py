"""Exception types shared across the package."""


class TinyTransferError(Exception):
    """Base class for all package errors."""


class DimensionError(TinyTransferError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(TinyTransferError):
    """Invalid construction parameters, config values, or unknown names."""


class DataError(TinyTransferError):
    """Malformed input data: bad labels, unreadable files, empty classes."""


class DivergenceError(TinyTransferError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ProtocolOrderError(TinyTransferError):
    """Stages invoked out of their mandatory I -> II -> III order."""


class ScheduleStateError(TinyTransferError):
    """Schedule queried outside its valid cycle position."""
