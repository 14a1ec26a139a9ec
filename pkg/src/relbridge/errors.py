"""Exception types shared across the package."""


class RelBridgeError(Exception):
    """Base class for all package errors."""


class DimensionError(RelBridgeError, ValueError):
    pass


class InvalidArgumentError(RelBridgeError, ValueError):
    pass


class PreconditionError(RelBridgeError, RuntimeError):
    pass


class ConfigurationError(RelBridgeError, ValueError):
    pass


class IntegrityError(RelBridgeError, ValueError):
    pass


class ParseError(RelBridgeError, ValueError):
    """A cell could not be parsed under its column kind."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaDriftError(RelBridgeError, ValueError):
    """A released dataset does not have its published shape."""


class TrainingDivergedError(RelBridgeError, RuntimeError):
    def __init__(self, message, epoch=None, loss=None, grad_norms=None):
        super().__init__(message)
        self.epoch = epoch
        self.loss = loss
        self.grad_norms = grad_norms or {}


class CacheCorruptionError(RelBridgeError, RuntimeError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class TransportError(RelBridgeError, RuntimeError):
    """A remote model could not be reached after all retries."""
