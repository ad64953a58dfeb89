"""REXUP: reason, extract and update cells over object-region and scene-graph knowledge bases."""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DegenerateAttentionError,
    DimensionError,
    GraphValidationError,
    NumericError,
    ParseError,
    RexupError,
    ValidationError,
)
from .harness import Metrics, TrainConfig, dump_attention, evaluate, run_suite, train
from .kernels import BACKEND
from .network import ModelConfig, RexupModel
from .synth import generate_dataset, read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DegenerateAttentionError",
    "DimensionError",
    "GraphValidationError",
    "Metrics",
    "ModelConfig",
    "NumericError",
    "ParseError",
    "RexupError",
    "RexupModel",
    "TrainConfig",
    "ValidationError",
    "dump_attention",
    "evaluate",
    "generate_dataset",
    "read_dataset",
    "run_suite",
    "train",
    "write_dataset",
]
