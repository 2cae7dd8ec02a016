from .const import EXIT_ATF, EXIT_CONFIG, EXIT_DATA, EXIT_FAILURE, EXIT_NUMERIC


class LabError(Exception):
    """Base class for every error raised by collision_lab."""

    exit_code: int = EXIT_FAILURE
    key: str | None = None


class ConfigError(LabError):
    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class NumericError(LabError):
    exit_code = EXIT_NUMERIC


class InvalidNumericState(NumericError):
    pass


class InvalidDistribution(NumericError):
    pass


class PretrainingFailed(NumericError):
    pass


class DegenerateVariance(NumericError):
    pass


class DataError(LabError):
    exit_code = EXIT_DATA


class DatasetTooSmall(DataError):
    pass


class StratificationError(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class InsufficientData(DataError):
    pass


class UntrainedHead(DataError):
    pass


class EmptyPool(DataError):
    pass


class BudgetExceedsPool(DataError):
    pass


class SchemaVersionMismatch(DataError):
    def __init__(self, message: str, path: str) -> None:
        super().__init__(message)
        self.key = path


class AtfError(LabError):
    exit_code = EXIT_ATF


class AtfMagicError(AtfError):
    pass


class AtfTruncatedError(AtfError):
    pass


class AtfDimensionError(AtfError):
    pass


class AtfFormatError(AtfError):
    pass


class NonFiniteTensorError(AtfError):
    pass
