"""Toy-scale Transformer encoder with squeeze-and-excitation layer fusion and Gaussian-blurred attention."""

from .attention import AttentionConfig, gaussian_kernel, multihead_attention
from .encoder import EncoderConfig, encoder_stack_forward
from .errors import (
    ConfigurationError,
    DimensionError,
    DivergenceError,
    EvaluationError,
    FormatError,
    InputError,
    SesameError,
)
from .fusion import SEConfig, pool, se_fusion
from .model import ModelConfig, forward, init_model
from .tensor import Tensor, grad_check, gradients
from .training import TrainConfig, evaluate, sigma_sweep, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "ConfigurationError",
    "DimensionError",
    "DivergenceError",
    "EncoderConfig",
    "EvaluationError",
    "FormatError",
    "InputError",
    "ModelConfig",
    "SEConfig",
    "SesameError",
    "Tensor",
    "TrainConfig",
    "encoder_stack_forward",
    "evaluate",
    "forward",
    "gaussian_kernel",
    "grad_check",
    "gradients",
    "init_model",
    "multihead_attention",
    "pool",
    "se_fusion",
    "sigma_sweep",
    "train",
]
