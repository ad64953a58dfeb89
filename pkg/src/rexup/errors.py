"""Exception hierarchy.

``ValidationError`` subclasses map to CLI exit code 2, ``NumericError`` to 3.
"""


class RexupError(Exception):
    pass


class ValidationError(RexupError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GraphValidationError(DataError):
    pass


class CheckpointError(ValidationError):
    pass


class DegenerateAttentionError(ValidationError):
    """Raised when a softmax row has no valid entry."""


class NumericError(RexupError, FloatingPointError):
    """Non-finite value in a forward value, gradient or loss."""
