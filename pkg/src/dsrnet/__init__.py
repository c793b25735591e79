"""dsrnet: a lightweight dynamic super-resolution network, from scratch on numpy."""

from .tensor import Tensor, Rng, elementwise_add, he_normal_init
from .layers import Tape, LayerParams, grad_check
from .model import ModelConfig, DsrNet, GateDecision, build, count_params, count_macs, save_model, load_model
from .optim import AdamState, adam_step, mse_loss, lr_at

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Rng", "elementwise_add", "he_normal_init",
    "Tape", "LayerParams", "grad_check",
    "ModelConfig", "DsrNet", "GateDecision", "build",
    "count_params", "count_macs", "save_model", "load_model",
    "AdamState", "adam_step", "mse_loss", "lr_at",
    "__version__",
]
