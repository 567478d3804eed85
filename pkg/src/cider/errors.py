"""Exception hierarchy. Each family maps onto one CLI exit code."""


class CiderError(Exception):
    exit_code = 1


class ConfigError(CiderError, ValueError):
    exit_code = 2


class DataError(CiderError):
    exit_code = 3


class ManifestParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestValidationError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class AudioError(DataError, IOError):
    pass


class AudioFormatError(AudioError):
    pass


class DSPError(DataError):
    pass


class ParameterError(CiderError, ValueError):
    exit_code = 2


class ContractError(CiderError, ValueError):
    pass


class TrainingError(CiderError):
    exit_code = 4


class DivergenceError(TrainingError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")


class InferenceError(CiderError):
    exit_code = 5


class EvaluationError(CiderError):
    exit_code = 5


class MetricError(EvaluationError, ValueError):
    pass
