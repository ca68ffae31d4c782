"""Gradient extraction and central finite-difference checking."""

from typing import Callable, Dict, Mapping

import numpy as np

from ctxlearn.core.tensor import Tensor, check_finite, no_grad
from ctxlearn.exceptions import ShapeError

Objective = Callable[[], Tensor]


def grad_of(f: Objective, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """
    Evaluate ``f`` and return d f / d p for every named parameter.

    Args:
        f: Zero-argument callable building a scalar from ``params``
        params: Named leaf tensors

    Returns:
        Gradient arrays keyed like ``params``; zeros where f does not depend on p
    """
    for tensor in params.values():
        tensor.zero_grad()
    value = f()
    if value.size != 1:
        raise ShapeError(f"objective must be scalar, got shape {value.shape}")
    check_finite(value.data, "objective")
    if value.requires_grad:
        value.backward()
    return {
        name: tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
        for name, tensor in params.items()
    }


def numerical_grad(f: Objective, params: Mapping[str, Tensor], h: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences (f(p + h) - f(p - h)) / 2h, one coordinate at a time."""
    grads = {}
    with no_grad():
        for name, tensor in params.items():
            original = tensor.data
            probe = original.copy()
            tensor.data = probe
            grad = np.zeros_like(probe)
            try:
                for i in range(probe.size):
                    saved = probe.flat[i]
                    probe.flat[i] = saved + h
                    upper = f().item()
                    probe.flat[i] = saved - h
                    lower = f().item()
                    probe.flat[i] = saved
                    grad.flat[i] = (upper - lower) / (2.0 * h)
            finally:
                tensor.data = original
            grads[name] = grad
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(f: Objective, params: Mapping[str, Tensor], h: float = 1e-5) -> Dict[str, float]:
    """Relative error between backprop and finite-difference gradients, per parameter."""
    analytic = grad_of(f, params)
    numeric = numerical_grad(f, params, h)
    return {name: relative_error(analytic[name], numeric[name]) for name in params}
