"""Exception types shared across the package."""


class CoatError(Exception):
    """Base class for library errors."""


class DimensionError(CoatError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(CoatError, ValueError):
    """A configuration violates its invariants."""


class NumericError(CoatError, ArithmeticError):
    """NaN or Inf where finite values are required."""


class ContractError(CoatError, ValueError):
    """A documented precondition of an API call was not met."""
