"""PlantXViT: a numpy implementation of the VGG-inception-transformer plant disease classifier.

Everything runs on a small reverse-mode autodiff core (:mod:`plantxvit.tensor`).
"""
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DatasetManifest, ImageSample, load_dataset, synth_dataset
from .explain import grad_cam, lime_explain
from .layers import InceptionConfig
from .metrics import confusion_matrix, metrics_report
from .model import (PlantXViTConfig, build_model, count_flops, count_params, load_checkpoint, predict,
                    save_checkpoint)
from .tensor import GradTape, Tensor, backward, grad_check, tensor_new
from .training import OptimizerState, TrainConfig, fit, optimizer_step, train_epochs

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "RunConfig", "load_config", "parse_config",
    "DatasetManifest", "ImageSample", "load_dataset", "synth_dataset",
    "grad_cam", "lime_explain", "InceptionConfig", "confusion_matrix", "metrics_report",
    "PlantXViTConfig", "build_model", "count_flops", "count_params", "load_checkpoint", "predict",
    "save_checkpoint", "GradTape", "Tensor", "backward", "grad_check", "tensor_new",
    "OptimizerState", "TrainConfig", "fit", "optimizer_step", "train_epochs",
]
