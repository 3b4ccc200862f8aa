"""Cross network plus deep tower click model: numpy training engine and polynomial verification oracle."""

__version__ = "0.1.0"

from .cross import CrossParams, cross_backward, cross_forward, cross_layer_forward, cross_param_count
from .deep import DeepParams, deep_backward, deep_forward, deep_layer_forward, deep_param_count
from .model import ModelConfig, ModelParams, logloss, model_backward, model_forward

__all__ = [
    "CrossParams",
    "DeepParams",
    "ModelConfig",
    "ModelParams",
    "cross_backward",
    "cross_forward",
    "cross_layer_forward",
    "cross_param_count",
    "deep_backward",
    "deep_forward",
    "deep_layer_forward",
    "deep_param_count",
    "logloss",
    "model_backward",
    "model_forward",
]
