"""Sparse-coding (LCA) audio keyword classifiers and their robustness benchmarks."""

from .errors import CheckpointError, DataError, LcaNetError, NumericError, ShapeError, TapeError
from .features import MfccConfig, NormStats
from .lca import Dictionary, LcaConfig
from .models import Classifier, ModelParams, ModelSpec, TrainConfig

__all__ = [
    "CheckpointError", "DataError", "LcaNetError", "NumericError", "ShapeError", "TapeError",
    "MfccConfig", "NormStats", "Dictionary", "LcaConfig",
    "Classifier", "ModelParams", "ModelSpec", "TrainConfig",
]
__version__ = "0.1.0"
