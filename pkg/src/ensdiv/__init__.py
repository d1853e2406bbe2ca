"""Ensemble diversity toolkit.

Reverse-mode autodiff on numpy, small MLP/CNN members, joint ensemble
losses, attribution maps, diversity metrics, consensus rules, synthetic
shapes with corruptions and a design-diversity failure model.
"""

from .autodiff import Graph, Var
from .consensus import combine
from .corruptions import CorruptionSpec, corrupt
from .data import Dataset, gen_shapes, load_idx
from .estimator import AttributionTransformer, Corruption, EnsembleClassifier
from .exceptions import EnsDivError
from .losses import LossConfig, compute_loss
from .nn import EnsembleModel, Model, ModelSpec
from .optim import OptimConfig, Optimizer

__version__ = "0.1.0"

__all__ = [
    "AttributionTransformer",
    "Corruption",
    "CorruptionSpec",
    "Dataset",
    "EnsDivError",
    "EnsembleClassifier",
    "EnsembleModel",
    "Graph",
    "LossConfig",
    "Model",
    "ModelSpec",
    "OptimConfig",
    "Optimizer",
    "Var",
    "combine",
    "compute_loss",
    "corrupt",
    "gen_shapes",
    "load_idx",
]
