"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class DataError(ValueError):
    """A data file is truncated, corrupt, or otherwise malformed."""


class CheckpointError(ValueError):
    """A checkpoint file cannot be read (bad magic, version mismatch, truncation)."""
