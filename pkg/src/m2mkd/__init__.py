"""Module-to-module knowledge distillation on a small numpy autodiff engine."""

from . import assembly, data, losses, nn, tensor, train
from .assembly import ModelSpec, build_hybrid, partition_layers, split_model, assemble, transplant
from .data import gen_synthetic, load_checkpoint, load_idx, save_checkpoint
from .losses import cross_entropy, kd_loss
from .tensor import Tensor, backward, no_grad
from .train import DistillConfig

__version__ = "0.1.0"
