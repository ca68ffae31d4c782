"""Post-layer-norm Transformer backbone with distance-penalty (alibi) attention."""

import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ctxlearn.core import functional as F
from ctxlearn.core.tensor import Tensor, check_finite, concat
from ctxlearn.exceptions import ConfigError, NumericFaultError, ShapeError
from ctxlearn.masking import Layout, MaskPlan, kept_index_matrix
from ctxlearn.network.params import ModelParams, xavier
from ctxlearn.network.tokens import EncodeTrace, TokenBatch

logger = logging.getLogger(__name__)


class BackboneConfig(BaseModel):
    """Transformer shape. Post-LN is the only supported norm placement."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = Field(4, ge=0)
    width: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    ffn_mult: int = Field(4, ge=1)
    norm_style: str = "post"
    ln_eps: float = Field(1e-5, gt=0)

    alibi: bool = False
    alibi_learn_scalars: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.norm_style != "post":
            raise ValueError(f"norm_style must be 'post', got {self.norm_style!r}")
        return self


def alibi_slopes(heads: int) -> np.ndarray:
    """Geometric per-head slopes 2^(-8h/H), h = 1..H."""
    return np.array([2.0 ** (-8.0 * h / heads) for h in range(1, heads + 1)])


def position_distances(position_ids: np.ndarray, layout: Layout) -> np.ndarray:
    """``[batch, n, n]`` distances between original positions: |i - j| on lines, Euclidean on grids."""
    coords = layout.coordinates()[position_ids].astype(np.float64)
    delta = coords[:, :, None, :] - coords[:, None, :, :]
    return np.sqrt((delta * delta).sum(axis=-1))


def alibi_bias(
    position_ids: np.ndarray,
    layout: Layout,
    slopes: np.ndarray,
    scalars: Optional[Tensor] = None,
    prefix_tokens: int = 0,
) -> Tensor:
    """
    Pre-softmax attention bias ``[batch, heads, q, k]``.

    bias[h, i, j] = -scalar[h] * slope[h] * distance(i, j), computed from the
    original position ids. Prefix tokens (CLS) get zero bias in both directions.
    """
    distances = position_distances(position_ids, layout)
    if prefix_tokens:
        distances = np.pad(distances, [(0, 0), (prefix_tokens, 0), (prefix_tokens, 0)])
    base = -np.asarray(slopes)[None, :, None, None] * distances[:, None]
    if scalars is None:
        return Tensor(base)
    return scalars.reshape(1, -1, 1, 1) * base


def select_unmasked(tokens: TokenBatch, plans: Sequence[MaskPlan]) -> TokenBatch:
    """Keep only the visible positions of each sample, preserving original position ids."""
    if len(plans) != tokens.batch_size:
        raise ShapeError(f"{len(plans)} plans for a batch of {tokens.batch_size}")
    if any(plan.layout != tokens.layout for plan in plans):
        raise ShapeError("mask plan layout does not match the token layout")
    if not tokens.is_full:
        raise ShapeError("select_unmasked needs the full token stream")
    index = kept_index_matrix(plans)
    rows = np.arange(tokens.batch_size)[:, None]
    return TokenBatch(F.gather_rows(tokens.tokens, index), tokens.position_ids[rows, index], tokens.layout)


def masked_relative_conv(
    tokens: TokenBatch,
    plans: Sequence[MaskPlan],
    weight: Tensor,
    bias: Optional[Tensor] = None,
) -> TokenBatch:
    """
    Depthwise relative-position convolution that only sees visible time-steps.

    Visible tokens are laid back onto the full sequence with zeros at masked
    positions, so kernel taps landing on masked steps contribute nothing.
    The result is gathered back to the visible positions.
    """
    if tokens.layout.is_grid:
        raise ConfigError("masked relative convolution is defined for 1-D layouts only")
    if weight.shape[-1] % 2 == 0:
        raise ConfigError(f"relative conv kernel must be odd, got {weight.shape[-1]}")
    expected = kept_index_matrix(plans)
    if not np.array_equal(expected, tokens.position_ids):
        raise ShapeError("token positions do not match the kept positions of the plans")

    width = tokens.width
    canvas = Tensor(np.zeros((tokens.batch_size, tokens.layout.length, width), dtype=tokens.tokens.dtype))
    full = F.scatter_rows(canvas, tokens.position_ids, tokens.tokens)
    out = F.grouped_conv(full.transpose(0, 2, 1), weight, groups=width, dims=1, bias=bias)
    return tokens.with_tokens(F.gather_rows(out.transpose(0, 2, 1), tokens.position_ids))


class Backbone:
    """Stack of post-LN blocks: attention -> residual -> LN -> FFN -> residual -> LN."""

    def __init__(self, config: BackboneConfig):
        self.config = config

    def init_params(self, params: ModelParams, rng: np.random.Generator) -> None:
        width = self.config.width
        hidden = width * self.config.ffn_mult
        for i in range(self.config.depth):
            prefix = f"backbone.{i}"
            params.add(f"{prefix}.attn_qkv_weight", xavier(rng, width, 3 * width))
            params.add(f"{prefix}.attn_qkv_bias", np.zeros(3 * width))
            params.add(f"{prefix}.attn_out_weight", xavier(rng, width, width))
            params.add(f"{prefix}.attn_out_bias", np.zeros(width))
            params.add(f"{prefix}.attn_norm_weight", np.ones(width))
            params.add(f"{prefix}.attn_norm_bias", np.zeros(width))
            params.add(f"{prefix}.ffn_in_weight", xavier(rng, width, hidden))
            params.add(f"{prefix}.ffn_in_bias", np.zeros(hidden))
            params.add(f"{prefix}.ffn_out_weight", xavier(rng, hidden, width))
            params.add(f"{prefix}.ffn_out_bias", np.zeros(width))
            params.add(f"{prefix}.ffn_norm_weight", np.ones(width))
            params.add(f"{prefix}.ffn_norm_bias", np.zeros(width))
        if self.config.alibi:
            heads = self.config.heads
            params.add("backbone.alibi_slopes", alibi_slopes(heads), frozen=True)
            params.add("backbone.alibi_scalars", np.ones(heads), frozen=not self.config.alibi_learn_scalars)

    def attention(self, params, block: int, x: Tensor, bias: Optional[Tensor], meter=None, component: str = "") -> Tensor:
        batch, length, width = x.shape
        heads = self.config.heads
        head_dim = width // heads
        prefix = f"backbone.{block}"

        qkv = F.linear(x, params[f"{prefix}.attn_qkv_weight"], params[f"{prefix}.attn_qkv_bias"])
        qkv = qkv.reshape(batch, length, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        if bias is not None:
            scores = scores + bias
        context = F.softmax(scores, axis=-1) @ v
        context = context.transpose(0, 2, 1, 3).reshape(batch, length, width)

        if meter is not None:
            meter.add(component, "attn_scores", 2 * batch * heads * length * length * head_dim)
            meter.add(component, "attn_values", 2 * batch * heads * length * length * head_dim)
            meter.add(component, "projections", 2 * batch * length * width * 4 * width)
        return F.linear(context, params[f"{prefix}.attn_out_weight"], params[f"{prefix}.attn_out_bias"])

    def block(self, params, block: int, x: Tensor, bias: Optional[Tensor], meter=None, component: str = ""):
        """One block; returns (block output, FFN tap taken post-residual, pre-LN)."""
        prefix = f"backbone.{block}"
        eps = self.config.ln_eps
        h = x + self.attention(params, block, x, bias, meter, component)
        h = F.layer_norm(h, params[f"{prefix}.attn_norm_weight"], params[f"{prefix}.attn_norm_bias"], eps)
        f = F.gelu(F.linear(h, params[f"{prefix}.ffn_in_weight"], params[f"{prefix}.ffn_in_bias"]))
        f = F.linear(f, params[f"{prefix}.ffn_out_weight"], params[f"{prefix}.ffn_out_bias"])
        tap = h + f
        out = F.layer_norm(tap, params[f"{prefix}.ffn_norm_weight"], params[f"{prefix}.ffn_norm_bias"], eps)
        if meter is not None:
            batch, length, width = x.shape
            meter.add(component, "ffn", 2 * batch * length * width * width * self.config.ffn_mult * 2)
        return out, tap

    def encode(
        self,
        params,
        tokens: TokenBatch,
        keep_trace: bool = False,
        prefix: Optional[Tensor] = None,
        meter=None,
        component: str = "student",
    ) -> EncodeTrace:
        """
        Run every block over ``tokens``.

        Args:
            params: Parameter map holding ``backbone.*``
            tokens: Token stream, full or unmasked-only
            keep_trace: Keep every block's FFN output for target building
            prefix: Optional ``[batch, p, width]`` tokens (CLS) prepended before block 0
                and split off again from every output
            meter: Optional FLOP meter with ``add(component, kind, flops)``
            component: Label the meter books FLOPs under

        Returns:
            EncodeTrace with the final output and, when kept, ``depth`` FFN records
        """
        width = tokens.width
        if width != self.config.width:
            raise ShapeError(f"tokens have width {width}, backbone expects {self.config.width}")
        n_prefix = 0 if prefix is None else prefix.shape[1]
        x = tokens.tokens if prefix is None else concat([prefix, tokens.tokens], axis=1)

        bias = None
        if self.config.alibi:
            scalars = params["backbone.alibi_scalars"]
            slopes = params["backbone.alibi_slopes"].data
            bias = alibi_bias(tokens.position_ids, tokens.layout, slopes, scalars, n_prefix)

        ffn_outputs: List[Tensor] = []
        for i in range(self.config.depth):
            try:
                x, tap = self.block(params, i, x, bias, meter, component)
                check_finite(x.data, f"backbone block {i}")
            except NumericFaultError as e:
                if e.where.startswith("backbone block"):
                    raise
                raise NumericFaultError(f"backbone block {i} ({e.where})") from e
            if keep_trace:
                ffn_outputs.append(tap[:, n_prefix:] if n_prefix else tap)

        cls = x[:, 0] if n_prefix else None
        body = x[:, n_prefix:] if n_prefix else x
        return EncodeTrace(tokens.with_tokens(body), ffn_outputs, cls)
