"""Small dense autodiff kernel: tensors, MLPs, Adam, gradient checking."""

from .adam import AdamState, adam_step
from .gradcheck import EvaluationError, grad_check, grad_check_report
from .mlp import MLP, MLPSpec, forward_mlp, init_mlp
from .tensor import (
    ContractError,
    DimensionError,
    ParameterBlock,
    Tensor,
    as_tensor,
    backward,
    no_grad,
)

__all__ = [
    "AdamState", "adam_step", "EvaluationError", "grad_check", "grad_check_report",
    "MLP", "MLPSpec", "forward_mlp", "init_mlp", "ContractError", "DimensionError",
    "ParameterBlock", "Tensor", "as_tensor", "backward", "no_grad",
]
