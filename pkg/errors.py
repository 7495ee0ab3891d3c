"""Exception types shared by every module."""


class HybridVentError(Exception):
    """Base class for all errors raised by this package"""


class ConfigurationError(HybridVentError):
    """A configuration value is missing, unknown or out of range"""

    def __init__(self, message: str, field: str = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DimensionError(HybridVentError):
    """Tensor shapes do not line up"""


class ContractError(HybridVentError):
    """An operation was called outside its precondition"""


class NumericsError(HybridVentError):
    """A computation produced NaN or Inf"""


class SimulationError(HybridVentError):
    def __init__(self, message: str, step: int = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class WeatherParseError(HybridVentError):
    def __init__(self, message: str, row: int = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DatasetSchemaError(HybridVentError):
    def __init__(self, message: str, column: str = None, row: int = None):
        self.column = column
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class CheckpointError(HybridVentError):
    """Checkpoint file could not be written or read back"""


class TrainingError(HybridVentError):
    def __init__(self, message: str, parameter: str = None):
        self.parameter = parameter
        super().__init__(message)


class MetricError(HybridVentError):
    """A metric is undefined for the given data"""
