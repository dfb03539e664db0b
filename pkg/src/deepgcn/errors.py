"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of operands do not line up."""


class NumericError(ArithmeticError):
    """A forward op produced NaN/Inf, or a statistic is undefined."""


class ConfigError(ValueError):
    """Invalid model, training or run configuration."""


class SchemaError(ValueError):
    """A data file is structurally inconsistent."""


class ParseError(ValueError):
    """A data file row could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SamplingError(RuntimeError):
    """Block sampling could not find a non-empty region."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupted or incompatible."""
