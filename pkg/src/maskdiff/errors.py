class ConfigError(ValueError):
    """Invalid configuration, shape, or argument."""


class CheckpointError(RuntimeError):
    """Corrupt, missing, or incompatible checkpoint data."""


class InvariantError(RuntimeError):
    """An internal invariant was violated; the run cannot continue."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


class DataError(RuntimeError):
    """Missing, truncated, or malformed grid dataset files."""
