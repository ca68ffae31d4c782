"""Regression losses over masked positions."""

from typing import Sequence, Union

import numpy as np

from ctxlearn.core.tensor import Tensor, as_tensor
from ctxlearn.exceptions import ConfigError, DegenerateMaskError, ShapeError
from ctxlearn.masking import MaskPlan
from ctxlearn.network.feature_encoders import patchify
from ctxlearn.teacher import TargetBatch

# Variance guard for per-patch pixel normalization
PIXEL_NORM_EPS = 1e-6

Targets = Union[TargetBatch, np.ndarray]


def _target_array(targets: Targets) -> np.ndarray:
    return targets.y if isinstance(targets, TargetBatch) else np.asarray(targets)


def masked_weights(plans: Sequence[MaskPlan]) -> np.ndarray:
    """``[batch, L, 1]`` with 1.0 at masked positions; every sample must mask something."""
    masked = np.stack([~plan.kept for plan in plans])
    empty = np.flatnonzero(masked.sum(axis=1) == 0)
    if empty.size:
        raise DegenerateMaskError(f"sample {int(empty[0])} has no masked positions to predict")
    return masked[:, :, None].astype(np.float64)


def _masked_mean_square(pred: Tensor, target: np.ndarray, plans: Sequence[MaskPlan]) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if len(plans) != pred.shape[0]:
        raise ShapeError(f"{len(plans)} plans for a batch of {pred.shape[0]}")
    weights = masked_weights(plans).astype(pred.dtype)
    diff = pred - Tensor(target.astype(pred.dtype))
    denom = float(weights.sum()) * pred.shape[-1]
    return (diff * diff * Tensor(weights)).sum() * (1.0 / denom)


def l2_masked_loss(pred: Tensor, targets: Targets, plans: Sequence[MaskPlan]) -> Tensor:
    """Mean of (pred - y)^2 over masked positions and width; kept positions are excluded."""
    return _masked_mean_square(pred, _target_array(targets), plans)


def cls_loss(student_cls: Tensor, targets: Targets) -> Tensor:
    """L2 between the student CLS output ``[batch, width]`` and the position-mean of the targets."""
    if student_cls is None:
        raise ConfigError("the CLS loss needs a CLS token; enable features.cls_token (images only)")
    y = _target_array(targets).mean(axis=1)
    student_cls = as_tensor(student_cls)
    if student_cls.shape != y.shape:
        raise ShapeError(f"CLS output {student_cls.shape} and CLS target {y.shape} differ")
    diff = student_cls - Tensor(y.astype(student_cls.dtype))
    return (diff * diff).mean()


def normalized_patches(images: np.ndarray, patch: int, eps: float = PIXEL_NORM_EPS) -> np.ndarray:
    """Pixel targets: every patch standardized by its own mean and variance."""
    if images.ndim != 4:
        raise ConfigError("pixel regression is only defined for image batches [batch, C, H, W]")
    patches = patchify(np.asarray(images, dtype=np.float64), patch)
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + eps)


def pixel_regression_loss(pred_pixels: Tensor, images: np.ndarray, plans: Sequence[MaskPlan],
                          patch: int) -> Tensor:
    """L2 against per-patch normalized pixels at masked positions."""
    if pred_pixels is None:
        raise ConfigError("pixel regression needs the decoder pixel head")
    return _masked_mean_square(pred_pixels, normalized_patches(images, patch), plans)
