from . import tensor as ops
from .gradcheck import GradCheckReport, NonDeterministicError, check_function, grad_check, rel_err
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter
from .tensor import OPS, Tensor, backward, no_grad

__all__ = [
    "OPS", "Tensor", "backward", "no_grad", "ops",
    "Module", "Parameter", "Linear", "LayerNorm", "MLP", "Conv2d",
    "grad_check", "check_function", "rel_err", "GradCheckReport", "NonDeterministicError",
]
