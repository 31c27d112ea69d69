"""Multimodal trajectory forecasting with two-level Laplace mixtures.

The usual entry points are re-exported here; the submodules carry the
full surface (tensor, layers, mixture, losses, models, training, data,
metrics, aggregate, plots, cli).
"""

from .losses import LossConfig, compute_loss
from .mixture import HierarchicalMixture, MixtureForecast
from .models import (EnsembleSpec, GroupedTransformerForecaster, HeadSpec,
                     MLPForecaster, TransformerConfig, build_ensemble)
from .tensor import Tape, Tensor, finite_diff_check
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "EnsembleSpec",
    "GroupedTransformerForecaster",
    "HeadSpec",
    "HierarchicalMixture",
    "LossConfig",
    "MLPForecaster",
    "MixtureForecast",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TransformerConfig",
    "build_ensemble",
    "compute_loss",
    "finite_diff_check",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
