"""Minimal dense-tensor library with reverse-mode autodiff."""

from . import functional
from .functional import Segments
from .gradcheck import check_gradients, directional_check, numeric_grad, relative_error
from .nn import BatchNorm, Conv2d, ConvNormAct, Linear, LinearNormAct, Module, Parameter
from .optim import AdamW, OptimizerState, WarmupCosine, adamw_step
from .tensor import Tensor, as_tensor, is_grad_enabled, no_grad, set_debug

__all__ = [
    "AdamW",
    "BatchNorm",
    "Conv2d",
    "ConvNormAct",
    "Linear",
    "LinearNormAct",
    "Module",
    "OptimizerState",
    "Parameter",
    "Segments",
    "Tensor",
    "WarmupCosine",
    "adamw_step",
    "as_tensor",
    "check_gradients",
    "directional_check",
    "functional",
    "is_grad_enabled",
    "no_grad",
    "numeric_grad",
    "relative_error",
    "set_debug",
]
