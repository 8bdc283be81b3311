"""
bconv: batch-related convolutional cells for plain numpy.

The package trains small convolutional networks whose BConv-Cells keep a latent
state across the mini-batches of an epoch. The state is zeroed at every epoch
start and stays zero during evaluation, so a trained network predicts each
sample independently. Everything runs on a small define-by-run autodiff engine
over numpy arrays.

Key Features:
    - BConv-Cell and BConv-Cell-v2 with epoch-scoped latent (and hidden) state
    - PTL networks pairing every conv-block with a cell, plus backbone-only baselines
    - Student-teacher distillation from a PTL teacher into a plain backbone
    - Finite-difference gradient checks, CIFAR binary readers, checksummed checkpoints

Example:
    >>> import numpy as np
    >>> from bconv import NetworkConfig, OptimizerState, build_network
    >>> from bconv import synth_generate, train_epoch
    >>> data = synth_generate(classes=4, per_class=20, resolution=(8, 8), seed=0)
    >>> config = NetworkConfig(resolution=(8, 8), classes=4)
    >>> net = build_network(config, np.random.default_rng(0))
    >>> row = train_epoch(net, data, OptimizerState(), seed=0)
"""

__version__ = "0.1.0"
__author__ = "Christensen, Daniel"

from .cells import (
    BConvCellParams,
    BConvCellV2Params,
    CellState,
    bconv_forward,
    bconv_v2_forward,
    latent_unroll_oracle,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import BatchPlan, DataError, Dataset, batches, cifar_read, synth_generate
from .network import (
    BackboneNetwork,
    NetworkConfig,
    PTLNetwork,
    build_backbone,
    build_network,
)
from .tensor import NonFiniteError, ShapeError, Tensor, backward
from .training import (
    DistillConfig,
    OptimizerState,
    distill_epoch,
    distill_loss,
    evaluate,
    lr_schedule,
    sgd_momentum_step,
    train_epoch,
)

__all__ = [
    "BConvCellParams",
    "BConvCellV2Params",
    "BackboneNetwork",
    "BatchPlan",
    "CellState",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Dataset",
    "DistillConfig",
    "NetworkConfig",
    "NonFiniteError",
    "OptimizerState",
    "PTLNetwork",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "backward",
    "batches",
    "bconv_forward",
    "bconv_v2_forward",
    "build_backbone",
    "build_network",
    "cifar_read",
    "distill_epoch",
    "distill_loss",
    "evaluate",
    "latent_unroll_oracle",
    "load_checkpoint",
    "load_config",
    "lr_schedule",
    "parse_config",
    "save_checkpoint",
    "sgd_momentum_step",
    "synth_generate",
    "train_epoch",
]
