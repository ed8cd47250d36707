"""Masked generative modeling of continuous latent grids with a per-position diffusion head."""
from .config import DecodeConfig, ModelConfig, RunConfig, TrainConfig
from .errors import CheckpointError, ConfigError, DataError, InvariantError, TrainingDiverged

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TrainConfig", "DecodeConfig", "RunConfig", "ConfigError",
           "CheckpointError", "DataError", "InvariantError", "TrainingDiverged"]
