"""Modulated binary CliqueNet: 1-bit weights, M-filter modulation and clique blocks on numpy."""
from .clique import BlockConfig, MBCliqueNet, NetworkConfig, count_parameters, preset
from .estimator import MBCliqueNetClassifier
from .modelio import compression_report, load_model, save_model
from .training import TrainConfig

__all__ = [
    "BlockConfig",
    "MBCliqueNet",
    "MBCliqueNetClassifier",
    "NetworkConfig",
    "TrainConfig",
    "compression_report",
    "count_parameters",
    "load_model",
    "preset",
    "save_model",
]
__version__ = "0.1.0"
