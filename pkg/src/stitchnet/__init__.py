"""Two-task neural networks with learnable cross-stitch feature sharing.

Numpy-backed building blocks: a small layer zoo with hand-coded backward
passes, 2x2 cross-stitch mixing units, exhaustive split-architecture
enumeration, an SGD trainer with per-group learning-rate scaling, a
finite-difference gradient checker, and a deterministic synthetic two-task
dataset generator. ``stitchnet.cli`` wraps it all in a config-driven
experiment command line.
"""

from ._kernels import BACKEND
from .datagen import DatasetConfig, TwoTaskDataset, generate, load_dataset, save_dataset, starve
from .gradcheck import GradReport, check_network, draw_safe_batch, finite_diff
from .layers import (
    ContractError,
    LayerSpec,
    ShapeError,
    conv2d,
    dense,
    flatten,
    layer_backward,
    layer_forward,
    maxpool2d,
    relu,
    softmax_ce_head,
)
from .network import (
    Network,
    SplitNetwork,
    StitchedNetwork,
    build_one_task,
    build_split,
    init_networks,
    stitch,
)
from .specs import (
    NetworkSpec,
    SplitArchitecture,
    default_network_spec,
    enumerate_splits,
    site_channels,
    two_block_network_spec,
)
from .training import (
    DivergenceError,
    Metrics,
    TaskBatch,
    TrainConfig,
    TrainHistory,
    compute_loss,
    ensemble_eval,
    evaluate,
    sgd_step,
    train,
)
from .units import CrossStitchUnit, cross_stitch_backward, cross_stitch_forward, init_alphas

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ContractError",
    "CrossStitchUnit",
    "DatasetConfig",
    "DivergenceError",
    "GradReport",
    "LayerSpec",
    "Metrics",
    "Network",
    "NetworkSpec",
    "ShapeError",
    "SplitArchitecture",
    "SplitNetwork",
    "StitchedNetwork",
    "TaskBatch",
    "TrainConfig",
    "TrainHistory",
    "TwoTaskDataset",
    "build_one_task",
    "build_split",
    "check_network",
    "compute_loss",
    "conv2d",
    "cross_stitch_backward",
    "cross_stitch_forward",
    "default_network_spec",
    "dense",
    "draw_safe_batch",
    "ensemble_eval",
    "enumerate_splits",
    "evaluate",
    "finite_diff",
    "flatten",
    "generate",
    "init_alphas",
    "init_networks",
    "layer_backward",
    "layer_forward",
    "load_dataset",
    "maxpool2d",
    "relu",
    "save_dataset",
    "sgd_step",
    "site_channels",
    "softmax_ce_head",
    "starve",
    "stitch",
    "train",
    "two_block_network_spec",
]
