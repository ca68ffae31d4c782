"""Network operations built on the tensor core, each with a hand-written backward."""

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ctxlearn.core.tensor import Tensor, as_tensor, make_result
from ctxlearn.exceptions import ConfigError, DataError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)

# einsum equations for grouped same-padded convolution, keyed by spatial rank
_CONV_FORWARD = {1: "bgcsk,gock->bgos", 2: "bgcstkl,gockl->bgost"}
_CONV_WEIGHT_GRAD = {1: "bgcsk,bgos->gock", 2: "bgcstkl,bgost->gockl"}


# ---- activations & normalization ----

def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    data = x.data
    inner = _GELU_C * (data + 0.044715 * data ** 3)
    t = np.tanh(inner)
    out = 0.5 * data * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * data * (1.0 - t * t) * d_inner),)

    return make_result(out, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[n, classes]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label outside [0, {logits.shape[1]})")
    picked = log_softmax(logits, axis=1)[np.arange(labels.shape[0]), labels]
    return -picked.mean()


def _normalize(x: Tensor, axis: int, eps: float, op: str) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"{op} over an empty axis of shape {x.shape}")
    mean = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std
    n = x.shape[axis]

    def backward(g):
        g_sum = g.sum(axis=axis, keepdims=True)
        g_dot = (g * out).sum(axis=axis, keepdims=True)
        return (inv_std * (g - g_sum / n - out * g_dot / n),)

    return make_result(out, (x,), backward, op)


def layer_norm(
    x: Tensor,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    out = _normalize(x, -1, eps, "layer_norm")
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel) row of ``x[batch, channels, positions]`` over positions."""
    if x.ndim != 3:
        raise ShapeError(f"instance_norm expects [batch, channels, positions], got {x.shape}")
    if eps <= 0:
        raise ConfigError("instance_norm eps must be positive")
    return _normalize(x, -1, eps, "instance_norm")


# ---- linear maps & lookups ----

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table[vocab, width]`` selected by integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"token ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0])
        raise DataError(f"token id {bad} outside vocabulary of size {vocab}")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return make_result(table.data[ids], (table,), backward, "embedding")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[b, j] = x[b, index[b, j]]`` for ``x[batch, positions, width]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"index {index.shape} does not match batch of {x.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, index), g)
        return (grad,)

    return make_result(x.data[rows, index], (x,), backward, "gather_rows")


def scatter_rows(base: Tensor, index: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base[batch, positions, width]`` with rows ``index[b, j]`` replaced by ``values[b, j]``."""
    base, values = as_tensor(base), as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    if values.shape[:2] != index.shape or values.shape[0] != base.shape[0]:
        raise ShapeError(f"values {values.shape} and index {index.shape} do not line up with {base.shape}")
    rows = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    out[rows, index] = values.data

    def backward(g):
        grad_base = g.copy()
        grad_base[rows, index] = 0.0
        return grad_base, g[rows, index]

    return make_result(out, (base, values), backward, "scatter_rows")


# ---- convolutions ----

def _conv_same(x: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    dims = w.ndim - 2
    kernel = w.shape[2:]
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
    windows = sliding_window_view(np.pad(x, pad), kernel, axis=tuple(range(2, 2 + dims)))
    batch, channels = x.shape[:2]
    spatial = x.shape[2:]
    out_channels = w.shape[0]
    windows = windows.reshape(batch, groups, channels // groups, *spatial, *kernel)
    grouped = w.reshape(groups, out_channels // groups, channels // groups, *kernel)
    out = np.einsum(_CONV_FORWARD[dims], windows, grouped, optimize=True)
    return out.reshape(batch, out_channels, *spatial)


def grouped_conv(
    x: Tensor,
    weight: Tensor,
    groups: int = 1,
    dims: Optional[int] = None,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Stride-1, same-padded grouped convolution.

    Args:
        x: Input ``[batch, channels, *spatial]`` with one or two spatial axes
        weight: ``[out_channels, channels // groups, *kernel]`` with odd kernel extents
        groups: Number of channel groups; output group g only sees input group g
        dims: Spatial rank (1 or 2); inferred from ``weight`` when omitted
        bias: Optional ``[out_channels]``

    Returns:
        ``[batch, out_channels, *spatial]``, same spatial extents as ``x``
    """
    spatial_rank = weight.ndim - 2
    if dims is not None and dims != spatial_rank:
        raise ConfigError(f"dims={dims} but weight has {spatial_rank} spatial axes")
    if spatial_rank not in _CONV_FORWARD or x.ndim != spatial_rank + 2:
        raise ShapeError(f"grouped_conv supports 1-D/2-D inputs, got x {x.shape}, weight {weight.shape}")
    if groups < 1 or x.shape[1] % groups or weight.shape[0] % groups:
        raise ConfigError(
            f"channels ({x.shape[1]} in, {weight.shape[0]} out) are not divisible by groups={groups}"
        )
    if weight.shape[1] * groups != x.shape[1]:
        raise ShapeError(f"weight {weight.shape} expects {weight.shape[1] * groups} input channels, got {x.shape[1]}")
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ConfigError(f"same padding needs odd kernel extents, got {weight.shape[2:]}")

    out = _conv_same(x.data, weight.data, groups)
    batch = x.shape[0]
    out_groups = weight.shape[0] // groups
    in_groups = x.shape[1] // groups
    kernel = weight.shape[2:]
    kernel_axes = tuple(range(3, 3 + spatial_rank))

    def backward(g):
        # The adjoint of a stride-1 same conv is the same conv with flipped, in/out-swapped kernels
        flipped = np.swapaxes(weight.data.reshape(groups, out_groups, in_groups, *kernel), 1, 2)
        flipped = np.flip(flipped, axis=kernel_axes).reshape(groups * in_groups, out_groups, *kernel)
        grad_x = _conv_same(g, np.ascontiguousarray(flipped), groups)

        pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
        windows = sliding_window_view(np.pad(x.data, pad), kernel, axis=tuple(range(2, 2 + spatial_rank)))
        windows = windows.reshape(batch, groups, in_groups, *x.shape[2:], *kernel)
        g_grouped = g.reshape(batch, groups, out_groups, *g.shape[2:])
        grad_w = np.einsum(_CONV_WEIGHT_GRAD[spatial_rank], windows, g_grouped, optimize=True)
        return grad_x, grad_w.reshape(weight.shape)

    result = make_result(out, (x, weight), backward, "grouped_conv")
    if bias is not None:
        result = result + bias.reshape((1, -1) + (1,) * spatial_rank)
    return result


def conv1d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided 1-D convolution of ``x[batch, channels, samples]``."""
    batch, channels, length = x.shape
    out_channels, in_channels, kernel = weight.shape
    if in_channels != channels:
        raise ShapeError(f"conv1d weight expects {in_channels} channels, got {channels}")
    if length < kernel:
        raise ShapeError(f"conv1d input length {length} is shorter than kernel {kernel}")
    frames = (length - kernel) // stride + 1
    span = stride * (frames - 1) + 1

    out = np.zeros((batch, out_channels, frames), dtype=np.result_type(x.data, weight.data))
    for tap in range(kernel):
        out += np.einsum("bct,oc->bot", x.data[:, :, tap:tap + span:stride], weight.data[:, :, tap])

    def backward(g):
        grad_x = np.zeros_like(x.data)
        grad_w = np.zeros_like(weight.data)
        for tap in range(kernel):
            grad_x[:, :, tap:tap + span:stride] += np.einsum("bot,oc->bct", g, weight.data[:, :, tap])
            grad_w[:, :, tap] = np.einsum("bot,bct->oc", g, x.data[:, :, tap:tap + span:stride])
        return grad_x, grad_w

    return make_result(out, (x, weight), backward, "conv1d")
