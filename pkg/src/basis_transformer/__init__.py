"""Basis transformer for multi-task tabular regression, with a numpy autodiff core."""
from .data import Dataset, SplitSpec, load_csv, split
from .encoder import RowEncoder, TextEncoderSpec
from .metrics import aggregate, nnse, r2
from .model import BasisTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .smr import SmrConfig, smr_decode, smr_encode
from .train import TrainConfig, train_loop

__all__ = [
    "BasisTransformer",
    "Dataset",
    "ModelConfig",
    "RowEncoder",
    "SmrConfig",
    "SplitSpec",
    "TextEncoderSpec",
    "TrainConfig",
    "aggregate",
    "load_checkpoint",
    "load_csv",
    "nnse",
    "r2",
    "save_checkpoint",
    "smr_decode",
    "smr_encode",
    "split",
    "train_loop",
]
