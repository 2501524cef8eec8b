"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """An architecture or run configuration violates a constraint."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(ValueError):
    """A scalar argument is outside its allowed range."""


class DataError(ValueError):
    """Input data is malformed (unknown token, out-of-range id, mismatched records)."""


class FormatError(DataError):
    """A binary file is truncated, has the wrong magic, or an unsupported version."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(FloatingPointError):
    """Training produced a non-finite value."""
