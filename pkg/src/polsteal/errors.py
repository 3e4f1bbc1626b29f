"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class EmptyInputError(ValueError):
    """An operation received an empty dataset or sample."""


class DegenerateDataError(ValueError):
    """Data is non-empty but unusable (zero variance, zero weight sum, ...)."""


class FormatError(ValueError):
    """A persisted file is malformed, truncated or has an unknown version."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class BudgetExhaustedError(RuntimeError):
    """A victim query would exceed the total query budget."""


class BuildError(RuntimeError):
    """A victim build failed its competence check."""


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""
