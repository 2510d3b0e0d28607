"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""

from .gradcheck import GradCheckReport, ParamCheck, grad_check
from .tensor import Parameter, Tape, Tensor, active_tape, as_tensor
from . import ops

__all__ = [
    "GradCheckReport",
    "ParamCheck",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "grad_check",
    "ops",
]
