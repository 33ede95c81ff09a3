"""MalConv: malware detection from raw executable bytes.

A numpy implementation of the gated-convolution / global-max-pool network,
with a PE section parser, sparse class-activation-map explanations,
pre-activation diagnostics and a synthetic corpus generator.
"""

from .estimator import MalConvClassifier
from .exceptions import FormatError, InputError, InternalError, MalConvError, NumericalError
from .model import DESK_CONFIG, FULL_CONFIG, ModelConfig, ModelParams, param_count

__all__ = [
    "DESK_CONFIG",
    "FULL_CONFIG",
    "FormatError",
    "InputError",
    "InternalError",
    "MalConvClassifier",
    "MalConvError",
    "ModelConfig",
    "ModelParams",
    "NumericalError",
    "param_count",
]

__version__ = "0.1.0"
