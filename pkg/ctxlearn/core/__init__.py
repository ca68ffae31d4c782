# Numeric core: tensors, reverse-mode autodiff and network operations
from ctxlearn.core.tensor import (
    Tensor,
    as_tensor,
    concat,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)
from ctxlearn.core.gradcheck import grad_of, gradcheck, numerical_grad, relative_error

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "get_default_dtype",
    "is_grad_enabled",
    "no_grad",
    "set_default_dtype",
    "grad_of",
    "gradcheck",
    "numerical_grad",
    "relative_error",
]
