"""Mask-token merging and the lightweight grouped convolutional decoder."""

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ctxlearn.core import functional as F
from ctxlearn.core.tensor import Tensor, get_default_dtype
from ctxlearn.exceptions import ConfigError, ShapeError
from ctxlearn.masking import Layout, MaskPlan, kept_index_matrix, plan_rng
from ctxlearn.network.params import ModelParams, normal, xavier
from ctxlearn.network.tokens import TokenBatch

logger = logging.getLogger(__name__)

# Sample-index slot reserved for noise-token streams in plan_rng
NOISE_STREAM = 2 ** 32 - 1


class DecoderConfig(BaseModel):
    """D blocks of grouped conv -> LN -> GELU -> residual."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = Field(4, ge=1)                 # D
    kernel: int = Field(7, ge=1)
    groups: int = Field(16, ge=1)
    width: int = Field(64, ge=1)
    noise_std: float = Field(0.02, ge=0.0)

    @model_validator(mode="after")
    def _check(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"decoder kernel must be odd for same padding, got {self.kernel}")
        if self.width % self.groups:
            raise ValueError(f"decoder width {self.width} is not divisible by groups {self.groups}")
        return self


def noise_rng(seed: int, step: int, mask_index: int) -> np.random.Generator:
    return plan_rng(seed, step, NOISE_STREAM, mask_index)


def merge_mask_tokens(
    encoded: TokenBatch,
    plans: Sequence[MaskPlan],
    noise_std: float,
    rng: np.random.Generator,
) -> TokenBatch:
    """
    Lay encoded visible tokens back onto the full layout.

    Masked positions get i.i.d. N(0, noise_std^2) draws with no position
    embedding added.
    """
    index = kept_index_matrix(plans)
    if index.shape != encoded.position_ids.shape or not np.array_equal(index, encoded.position_ids):
        raise ShapeError("encoded positions do not match the kept positions of the plans")
    layout = plans[0].layout
    shape = (encoded.batch_size, layout.length, encoded.width)
    if noise_std > 0:
        noise = rng.normal(0.0, noise_std, size=shape).astype(get_default_dtype())
    else:
        noise = np.zeros(shape, dtype=get_default_dtype())
    merged = F.scatter_rows(Tensor(noise), index, encoded.tokens)
    return TokenBatch.full(merged, layout)


class DecoderOutput:
    def __init__(self, prediction: Optional[Tensor], pixels: Optional[Tensor]):
        self.prediction = prediction
        self.pixels = pixels


class ConvDecoder:
    """
    Grouped convolutional decoder over the full layout.

    1-D convolutions for sequences, 2-D over the patch grid for images. A
    per-position linear head maps to the target width; an optional second
    head predicts normalized pixels.
    """

    def __init__(self, config: DecoderConfig, encoder_width: int, target_width: int, dims: int = 1,
                 pixel_width: int = 0, predict_targets: bool = True):
        if dims not in (1, 2):
            raise ConfigError(f"decoder convolutions are 1-D or 2-D, got {dims}")
        self.config = config
        self.dims = dims
        self.encoder_width = encoder_width
        self.target_width = target_width
        self.pixel_width = pixel_width
        self.predict_targets = predict_targets

    def init_params(self, params: ModelParams, rng: np.random.Generator) -> None:
        width = self.config.width
        if width != self.encoder_width:
            params.add("decoder.in_proj_weight", xavier(rng, self.encoder_width, width))
            params.add("decoder.in_proj_bias", np.zeros(width))
        per_group = width // self.config.groups
        for i in range(self.config.depth):
            kernel = (self.config.kernel,) * self.dims
            params.add(f"decoder.{i}.conv_weight", normal(rng, (width, per_group) + kernel, std=0.02))
            params.add(f"decoder.{i}.conv_bias", np.zeros(width))
            params.add(f"decoder.{i}.norm_weight", np.ones(width))
            params.add(f"decoder.{i}.norm_bias", np.zeros(width))
        if self.predict_targets:
            params.add("decoder.proj_weight", xavier(rng, width, self.target_width))
            params.add("decoder.proj_bias", np.zeros(self.target_width))
        if self.pixel_width:
            params.add("decoder.pixel_weight", xavier(rng, width, self.pixel_width))
            params.add("decoder.pixel_bias", np.zeros(self.pixel_width))

    def _conv(self, params, block: int, x: Tensor, layout: Layout) -> Tensor:
        batch, length, width = x.shape
        weight = params[f"decoder.{block}.conv_weight"]
        if weight.ndim - 2 != len(layout.shape):
            raise ShapeError(f"decoder weights are {weight.ndim - 2}-D but the layout is {len(layout.shape)}-D")
        h = x.transpose(0, 2, 1).reshape(batch, width, *layout.shape)
        h = F.grouped_conv(h, weight, self.config.groups, dims=len(layout.shape),
                           bias=params[f"decoder.{block}.conv_bias"])
        return h.reshape(batch, width, length).transpose(0, 2, 1)

    def __call__(self, params, merged: TokenBatch, meter=None, component: str = "decoder") -> DecoderOutput:
        if not merged.is_full:
            raise ShapeError("the decoder consumes the full layout")
        x = merged.tokens
        if "decoder.in_proj_weight" in params:
            x = F.linear(x, params["decoder.in_proj_weight"], params["decoder.in_proj_bias"])
        for i in range(self.config.depth):
            h = self._conv(params, i, x, merged.layout)
            h = F.gelu(F.layer_norm(h, params[f"decoder.{i}.norm_weight"], params[f"decoder.{i}.norm_bias"]))
            x = x + h
        if meter is not None:
            batch, length, width = x.shape
            taps = self.config.kernel ** len(merged.layout.shape)
            per_group = width // self.config.groups
            meter.add(component, "conv", 2 * batch * length * width * per_group * taps * self.config.depth)

        prediction = pixels = None
        if self.predict_targets:
            prediction = F.linear(x, params["decoder.proj_weight"], params["decoder.proj_bias"])
        if self.pixel_width:
            pixels = F.linear(x, params["decoder.pixel_weight"], params["decoder.pixel_bias"])
        return DecoderOutput(prediction, pixels)
