"""Recursive deformable 3D image registration with mutual attention.

The public surface: domain types in :mod:`recureg.core`, the differentiable
spatial-transform algebra in :mod:`recureg.fieldops`, attention in
:mod:`recureg.attention`, the subnetwork in :mod:`recureg.network`, losses,
metrics, phantom data + file I/O in :mod:`recureg.synthdata`, the training
engine in :mod:`recureg.pipeline`, and the sklearn-style
:class:`~recureg.estimator.RecursiveRegistrar`.
"""

from .core import (
    DisplacementField,
    FeatureGrid,
    IndicatorMatrix,
    LabelMask,
    ModelConfig,
    ModelParams,
    RecursionConfig,
    ValidationError,
    Volume,
)
from .estimator import RecursiveRegistrar
from .pipeline import TrainConfig, evaluate, finetune, pretrain_synthetic, register, train
from .synthdata import PhantomPair, gen_phantom_pair, gen_smooth_ddf

__version__ = "0.1.0"

__all__ = [
    "DisplacementField",
    "FeatureGrid",
    "IndicatorMatrix",
    "LabelMask",
    "ModelConfig",
    "ModelParams",
    "PhantomPair",
    "RecursionConfig",
    "RecursiveRegistrar",
    "TrainConfig",
    "ValidationError",
    "Volume",
    "evaluate",
    "finetune",
    "gen_phantom_pair",
    "gen_smooth_ddf",
    "pretrain_synthetic",
    "register",
    "train",
    "__version__",
]
