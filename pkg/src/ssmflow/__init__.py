"""Selective state-space optical flow: scan kernels, Mamba blocks, global
matching, iterative refinement, and the tooling around them."""

from .config import ModelConfig, tiny_config
from .model import MambaFlow, model_forward, sequence_loss
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "tiny_config",
    "MambaFlow",
    "model_forward",
    "sequence_loss",
    "Tensor",
    "backward",
    "no_grad",
]
