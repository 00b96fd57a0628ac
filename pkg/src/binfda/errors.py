"""Exception hierarchy shared across the package."""


class BinfdaError(Exception):
    """Base class for all package errors."""


class InvalidSeries(BinfdaError, ValueError):
    pass


class EmptySample(BinfdaError, ValueError):
    pass


class DomainMismatch(BinfdaError, ValueError):
    pass


class Underdetermined(BinfdaError, ValueError):
    pass


class InvalidWarp(BinfdaError, ValueError):
    pass


class NonPositiveDerivative(BinfdaError, ValueError):
    pass


class TruncationError(BinfdaError, ValueError):
    pass


class PairingError(BinfdaError, ValueError):
    pass


class GroupError(BinfdaError, ValueError):
    pass


class ConfigError(BinfdaError, ValueError):
    pass
