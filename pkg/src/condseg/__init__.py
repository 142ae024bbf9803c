"""Metadata-conditioned channel modulation for U-Net segmentation.

A small numpy autodiff engine, SE/ME/SME/FiLM conditioning blocks, a
conditioned U-Net, deterministic synthetic benchmarks and the tooling to
train, evaluate and compare them.
"""

from .conditioning import ConditioningBlock, ConditioningKind, make_block
from .errors import (CheckpointError, CondsegError, CorruptFileError, MetadataError, NumericalError, ShapeError,
                     ValidationError)
from .estimator import ConditionedSegmenter
from .evaluation import EvalReport, evaluate, f1_score, per_image_f1
from .metadata import Categorical, Continuous, MetadataEncoder, MetadataSchema, dummy, encode, swap
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .unet import ConditionedUNet, UNetConfig, build_unet, forward, predict_mask

__version__ = "0.1.0"

__all__ = [
    "Categorical", "CheckpointError", "ConditionedSegmenter", "ConditionedUNet", "ConditioningBlock",
    "ConditioningKind", "CondsegError", "Continuous", "CorruptFileError", "EvalReport", "MetadataEncoder",
    "MetadataError", "MetadataSchema", "NumericalError", "ShapeError", "TrainConfig", "UNetConfig",
    "ValidationError", "build_unet", "dummy", "encode", "evaluate", "f1_score", "forward", "load_checkpoint",
    "make_block", "per_image_f1", "predict_mask", "save_checkpoint", "swap", "train",
]
