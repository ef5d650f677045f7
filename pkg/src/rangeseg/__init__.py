"""Pseudo-image LiDAR semantic segmentation: inference engine and evaluation toolkit."""

from .model import ModelConfig, ParamStore, forward, init_params, load_weights, save_weights
from .scan_io import DatasetConfig, RawScan, builtin_config

__all__ = [
    "DatasetConfig",
    "ModelConfig",
    "ParamStore",
    "RawScan",
    "builtin_config",
    "forward",
    "init_params",
    "load_weights",
    "save_weights",
]

__version__ = "0.1.0"
