"""Array autodiff core: tape, primitives, layers, optimizer, gradient checks.

Everything is numpy underneath.  Training runs in float32; gradient checking
swaps the whole model to float64.
"""

from . import layers, ops
from .gradcheck import finite_difference_check
from .optim import (
    AdamState,
    EmaState,
    LrSchedule,
    NonFiniteGradient,
    adam_step,
    clip_global_norm,
    ema_init,
    ema_update,
    l2_penalty,
    lr_at,
)
from .tensor import Tensor, as_tensor, backward, no_grad, parameter, tensor

__all__ = [
    "AdamState",
    "EmaState",
    "LrSchedule",
    "NonFiniteGradient",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "clip_global_norm",
    "ema_init",
    "ema_update",
    "finite_difference_check",
    "l2_penalty",
    "layers",
    "lr_at",
    "no_grad",
    "ops",
    "parameter",
    "tensor",
]
