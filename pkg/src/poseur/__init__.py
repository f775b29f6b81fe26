"""Keypoint regression with a deformable query decoder and likelihood-based training."""
from .config import RunConfig, load_config
from .errors import (
    BenchmarkInvalidError,
    ConfigurationError,
    ContractViolation,
    EmptyInputError,
    FormatError,
    NonFiniteLossError,
    OracleInvalidError,
    PoseurError,
)
from .estimator import PoseurEstimator
from .model import ModelConfig, PoseurModel

__version__ = "0.1.0"

__all__ = [
    "BenchmarkInvalidError",
    "ConfigurationError",
    "ContractViolation",
    "EmptyInputError",
    "FormatError",
    "ModelConfig",
    "NonFiniteLossError",
    "OracleInvalidError",
    "PoseurError",
    "PoseurEstimator",
    "PoseurModel",
    "RunConfig",
    "load_config",
]
