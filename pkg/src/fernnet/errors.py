class ConfigError(ValueError):
    """Invalid layer, model, or run configuration."""


class DataError(RuntimeError):
    """Malformed or missing input file (dataset, checkpoint, pattern file)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """Non-finite values encountered during training."""
