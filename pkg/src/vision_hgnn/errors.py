"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class DataError(RuntimeError):
    """Input data (images, dataset folders, labels) is missing or malformed."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or does not match the model config."""
