"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class ConfigError(ValueError):
    """A configuration value is inconsistent or infeasible."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class CapacityError(RuntimeError):
    """A requested materialization exceeds the configured memory budget."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""
