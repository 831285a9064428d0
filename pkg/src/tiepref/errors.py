"""Exception hierarchy shared across the package."""


class TieprefError(Exception):
    """Base class for all package errors."""


class DomainError(TieprefError, ValueError):
    """An input lies outside the domain of the operation (non-finite, unknown key)."""


class InvalidParameterError(TieprefError, ValueError):
    """A model parameter violates its constraints (e.g. theta < 1)."""


class NumericalError(TieprefError, ArithmeticError):
    """An iterative routine failed to converge."""


class GenerationError(TieprefError):
    pass


class RecordParseError(TieprefError, ValueError):
    """A record file line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ValidationError(TieprefError, ValueError):
    pass


class InvalidDatasetError(TieprefError, ValueError):
    """The dataset is incompatible with the requested loss."""


class TrainingError(TieprefError):
    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class UndefinedMetricError(TieprefError, ValueError):
    pass
