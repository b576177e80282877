"""Disentangled factor alignment for text-video retrieval on precomputed features."""
from .errors import (
    BatchSizeError,
    CheckpointError,
    ConfigError,
    CorruptStoreError,
    DataError,
    DicosaError,
    DomainError,
    NumericalError,
    ParameterError,
    ShapeError,
    VersionError,
)
from .model import AlignmentModel
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentModel",
    "BatchSizeError",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "CorruptStoreError",
    "DataError",
    "DicosaError",
    "DomainError",
    "NumericalError",
    "ParameterError",
    "ShapeError",
    "TrainConfig",
    "VersionError",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
