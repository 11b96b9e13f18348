"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad user input: paths, ranges, malformed files."""


class ShapeError(ValidationError):
    """Array dimensions do not line up."""


class ConfigError(ValidationError):
    """Inconsistent model or training configuration."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""
