"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in values or gradients."""


class ResourceError(RuntimeError):
    """A computation would exceed its configured budget."""


class DegenerateMassError(ArithmeticError):
    """An N-best list carries (numerically) no probability mass."""


class DataError(RuntimeError):
    """Input files are missing or malformed."""


class ConfigError(ContractError):
    """An experiment configuration is malformed or names unknown keys."""
