"""Weakly supervised multiple-instance colony classification with a from-scratch U-net.

The numeric core (``tensor``, ``functional``) is a small reverse-mode autodiff
library over numpy arrays; ``model`` builds the encoder-decoder classifier,
``weakseg`` turns its last activation into a binary colony mask.
"""

from .data import BAD, GOOD, Dataset, LabeledImage, SyntheticParams, generate_synthetic, mil_bag_label
from .metrics import EvalReport, aggregate_folds, auc, evaluate
from .model import MilNet, ModelConfig, build, load_checkpoint, parameter_count, save_checkpoint
from .optim import AdamState, LrSchedule
from .tensor import Tensor
from .training import TrainSettings, predict, train
from .weakseg import StructuringElement, segment

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BAD",
    "Dataset",
    "EvalReport",
    "GOOD",
    "LabeledImage",
    "LrSchedule",
    "MilNet",
    "ModelConfig",
    "StructuringElement",
    "SyntheticParams",
    "Tensor",
    "TrainSettings",
    "aggregate_folds",
    "auc",
    "build",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "mil_bag_label",
    "parameter_count",
    "predict",
    "save_checkpoint",
    "segment",
    "train",
]
