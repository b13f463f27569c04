"""Additive-attention (Fastformer-style) transformer in plain numpy.

Modules: ``numerics`` (kernels and FLOP counting), ``attention`` (heads and
their backward passes), ``model`` (full encoder, classifier, checkpoints),
``train`` (Adam, synthetic tasks, gradient checking), ``bench`` (scaling
sweeps) and ``cli``.
"""

from .attention import InteractionMode, multihead_forward, reference_forward
from .errors import ConfigError, FastaddError, NumericError, ShapeError
from .model import FastformerConfig, build_model, count_attention_params, forward
from .train import TrainConfig, grad_check, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FastaddError",
    "FastformerConfig",
    "InteractionMode",
    "NumericError",
    "ShapeError",
    "TrainConfig",
    "build_model",
    "count_attention_params",
    "forward",
    "grad_check",
    "multihead_forward",
    "reference_forward",
    "train_loop",
]
