"""Exception types shared across the package."""


class SkipnetError(Exception):
    """Base class for all package errors."""


class DimensionError(SkipnetError):
    """Tensor or layer shapes are incompatible."""


class ContractError(SkipnetError):
    """An operation was called outside its documented preconditions."""


class SchemaError(SkipnetError):
    """Feature schema is invalid or does not match the data."""


class DataError(SkipnetError):
    """Problem with input data files."""


class IngestionError(DataError):
    """Malformed row or value while reading a data file."""


class CheckpointError(SkipnetError):
    """Checkpoint file is missing, corrupt, or incompatible."""


class CalibrationError(SkipnetError):
    """Generator calibration failed to converge."""


class TrainingError(SkipnetError):
    """Non-finite gradients or other failures during optimization."""


class ConfigError(SkipnetError):
    """Invalid configuration file or command-line options."""
