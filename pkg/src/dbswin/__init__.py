"""Dual-branch windowed-transformer binary segmentation, built on a small
numpy autodiff core with optional numba-accelerated kernels."""

from .autodiff import Tensor, backward, no_grad
from .model import (BranchConfig, ModelConfig, init_model, model_forward,
                    param_count)
from .training import TrainConfig, evaluate, train

__all__ = [
    "Tensor", "backward", "no_grad",
    "BranchConfig", "ModelConfig", "init_model", "model_forward",
    "param_count", "TrainConfig", "train", "evaluate",
]
