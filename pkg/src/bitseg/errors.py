"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible shapes or an empty dimension."""


class NumericError(ValueError):
    """A value is NaN/inf where only finite numbers are allowed."""


class ConfigError(ValueError):
    """A configuration key, value, or combination is invalid."""


class FormatError(ValueError):
    """A serialized payload is malformed. Carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    """Training diverged. Carries the epoch where it happened."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
