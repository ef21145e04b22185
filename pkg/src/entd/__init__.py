"""Gaussian-process tensor decomposition for binary and count data."""

from .tensordata import (
    EntryBatch,
    SparseTensor,
    SplitSpec,
    balanced_negative_sample,
    load_coo,
    minibatches,
    save_coo,
    synth_binary,
    synth_count,
    train_test_split,
)
from .trainer import TrainConfig, TrainReport, fit, init_state, load_checkpoint, save_checkpoint

__all__ = [
    "EntryBatch",
    "SparseTensor",
    "SplitSpec",
    "TrainConfig",
    "TrainReport",
    "balanced_negative_sample",
    "fit",
    "init_state",
    "load_checkpoint",
    "load_coo",
    "minibatches",
    "save_checkpoint",
    "save_coo",
    "synth_binary",
    "synth_count",
    "train_test_split",
]

__version__ = "0.1.0"
