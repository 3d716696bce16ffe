from . import tensor as ops
from .adam import AdamState, NonFiniteGradientError, adam_step
from .gradcheck import GradCheckReport, NonFiniteOutputError, finite_diff_check
from .tensor import Tensor, no_grad

__all__ = [
    "AdamState",
    "GradCheckReport",
    "NonFiniteGradientError",
    "NonFiniteOutputError",
    "Tensor",
    "adam_step",
    "finite_diff_check",
    "no_grad",
    "ops",
]
