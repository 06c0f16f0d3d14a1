"""Exception hierarchy shared across the package."""


class FedSegError(Exception):
    """Base class for all package errors."""


class DimensionError(FedSegError, ValueError):
    """Tensor or mask shapes are incompatible with an operation."""


class NumericError(FedSegError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ContractError(FedSegError, ValueError):
    """An input violates a documented precondition."""


class StateError(FedSegError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class ConfigError(FedSegError, ValueError):
    """Invalid configuration value."""


class AggregationError(FedSegError, ValueError):
    """Client parameter sets cannot be aggregated."""


class TrainingError(FedSegError, RuntimeError):
    """Training diverged for a named client."""

    def __init__(self, message, client=None, epoch=None):
        super().__init__(message)
        self.client = client
        self.epoch = epoch


class UndefinedMetricError(FedSegError, ValueError):
    """A distance metric is undefined because a mask is empty."""


class CohortError(FedSegError, ValueError):
    """Too few clients for a cohort statistic."""


class CheckpointError(FedSegError, IOError):
    """Base class for checkpoint decoding failures."""

    code = 1


class CRCError(CheckpointError):
    code = 2


class VersionError(CheckpointError):
    code = 3


class DigestError(CheckpointError):
    code = 4


class StageError(FedSegError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
