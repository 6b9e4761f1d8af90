"""Exception hierarchy shared by every module."""


class FedUHBError(Exception):
    """Base class for all package errors."""


class ConfigError(FedUHBError, ValueError):
    pass


class ShapeError(FedUHBError, ValueError):
    pass


class NumericDomainError(FedUHBError, ValueError):
    pass


class AggregationError(FedUHBError, ValueError):
    pass


class FormatError(FedUHBError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ClientError(FedUHBError, RuntimeError):
    pass


class ProtocolError(FedUHBError, RuntimeError):
    pass


class StateError(FedUHBError, RuntimeError):
    pass


class EstimationError(FedUHBError, RuntimeError):
    pass


class MetricError(FedUHBError, ValueError):
    pass


class AttackSetupError(FedUHBError, ValueError):
    pass
