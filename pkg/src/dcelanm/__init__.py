"""DCELANM-Net: a numpy segmentation network with dual-channel ELAN blocks
and a micro masked autoencoder at the bottleneck."""

from .checkpoint import BadMagic, Checkpoint, CheckpointError, Truncated, VersionMismatch, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .data import DataError, DatasetManifest, SegSample, load_png, multiscale_resize, pad_to_square_resize, save_png, synth_dataset
from .estimator import DCELANMSegmenter, PadResize
from .gradcheck import finite_diff_check
from .mae import MaskPlan, MicroMAE
from .network import DCELANMNet, NetworkConfig, build_network, param_count
from .objective import MetricReport, TverskyParams, combined_loss, metrics, tversky_loss
from .optim import Adam, cosine_lr
from .rng import Rng
from .tensor import ShapeError, Tensor, no_grad
from .training import evaluate, predict, pretrain_mae, recalibrate_bn, train

__all__ = [
    "BadMagic",
    "Checkpoint",
    "CheckpointError",
    "Truncated",
    "VersionMismatch",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "load_config",
    "DataError",
    "DatasetManifest",
    "SegSample",
    "load_png",
    "multiscale_resize",
    "pad_to_square_resize",
    "save_png",
    "synth_dataset",
    "DCELANMSegmenter",
    "PadResize",
    "finite_diff_check",
    "MaskPlan",
    "MicroMAE",
    "DCELANMNet",
    "NetworkConfig",
    "build_network",
    "param_count",
    "MetricReport",
    "TverskyParams",
    "combined_loss",
    "metrics",
    "tversky_loss",
    "Adam",
    "cosine_lr",
    "Rng",
    "ShapeError",
    "Tensor",
    "no_grad",
    "evaluate",
    "predict",
    "recalibrate_bn",
    "pretrain_mae",
    "train",
]

__version__ = "0.1.0"
