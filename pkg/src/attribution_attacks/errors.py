class ParameterError(ValueError):
    """Invalid counts, sizes or budgets passed to a public operation."""


class DimensionError(ValueError):
    """Feature or parameter dimensions do not match."""


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxCountError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NumericalError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause, partial=None):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial or {}
