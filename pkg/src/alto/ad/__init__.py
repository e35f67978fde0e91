"""Dense arrays with reverse-mode differentiation, Adam, and gradient checks."""

from alto.ad import ops
from alto.ad.gradcheck import grad_check
from alto.ad.optim import Adam, AdamState, adam_step
from alto.ad.tensor import DEFAULT_DTYPE, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "DEFAULT_DTYPE",
    "Adam",
    "AdamState",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "grad_check",
    "grad_enabled",
    "no_grad",
    "ops",
]
