from . import functional, nn
from .functional import cosine_similarity, kl_divergence, layer_norm, softmax
from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    BACKWARD_RULES,
    DegenerateInputError,
    DimensionError,
    Parameter,
    Tensor,
    ValidationError,
    matmul,
    no_grad,
)

__all__ = [
    "BACKWARD_RULES",
    "DegenerateInputError",
    "DimensionError",
    "GradCheckReport",
    "Parameter",
    "Tensor",
    "ValidationError",
    "cosine_similarity",
    "functional",
    "grad_check",
    "kl_divergence",
    "layer_norm",
    "matmul",
    "nn",
    "no_grad",
    "softmax",
]
