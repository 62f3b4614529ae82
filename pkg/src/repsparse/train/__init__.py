"""Quantization-aware training at desk scale."""

from .data import DatasetMissing, load_dataset
from .ede import backward_quant, ede_grad_factor, ede_schedule, ste_grad
from .estimator import QATClassifier
from .histogram import weight_histogram, write_histogram_csv
from .layers import QuantConv2d
from .models import CNN4, ResNet20, build_model, quant_layers
from .trainer import TrainConfig, TrainResult, TrainState, read_metrics, save_checkpoint, train

__all__ = [
    "CNN4",
    "DatasetMissing",
    "QATClassifier",
    "QuantConv2d",
    "ResNet20",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "backward_quant",
    "build_model",
    "ede_grad_factor",
    "ede_schedule",
    "load_dataset",
    "quant_layers",
    "read_metrics",
    "save_checkpoint",
    "ste_grad",
    "train",
    "weight_histogram",
    "write_histogram_csv",
]
