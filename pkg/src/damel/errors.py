"""Exception types shared across the package."""


class DamelError(Exception):
    """Base class for all package errors."""


class ShapeError(DamelError):
    """Operands have shapes the requested operation cannot combine."""


class ContractError(DamelError):
    """A documented precondition or invariant was violated."""


class ConfigError(DamelError):
    """An experiment or model configuration is invalid."""


class CapacityError(DamelError):
    """A source dataset cannot supply the requested per-class counts."""


class NumericError(DamelError):
    """A non-finite value surfaced where finite arithmetic is required."""
