#!/usr/bin/env python3
"""Tests for feature encoders, unmasked-only selection, alibi bias and the backbone."""

import os
import sys

# Add repository root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from ctxlearn.core import Tensor, grad_of
from ctxlearn.core import functional as F
from ctxlearn.exceptions import ConfigError, DataError, NumericFaultError, ShapeError
from ctxlearn.masking import Layout, MaskConfig, MaskPlan, sample_plans
from ctxlearn.network import (
    Backbone,
    BackboneConfig,
    ConvFeatureEncoder,
    Encoder,
    FeatureConfig,
    Modality,
    ModelParams,
    PatchEmbed,
    TokenBatch,
    TokenEmbed,
    alibi_bias,
    alibi_slopes,
    masked_relative_conv,
    patchify,
    select_unmasked,
)


def plan_keeping(length, positions):
    kept = np.zeros(length, dtype=bool)
    kept[list(positions)] = True
    return MaskPlan(Layout.line(length), kept)


def full_batch(array):
    return TokenBatch.full(Tensor(array), Layout.line(array.shape[1]))


@pytest.mark.parametrize("size, patch, tokens", [(224, 16, 196), (32, 4, 64)])
def test_patch_counts(size, patch, tokens):
    embed = PatchEmbed(3, (size, size), patch, width=8)
    assert embed.layout.length == tokens


def test_patch_size_must_divide():
    with pytest.raises(ConfigError):
        PatchEmbed(3, (30, 32), 4, width=8)


def test_patchify_row_major():
    images = np.arange(16.0).reshape(1, 1, 4, 4)
    patches = patchify(images, 2)
    assert patches.shape == (1, 4, 4)
    np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7])


def test_conv_frame_count_recurrence():
    encoder = ConvFeatureEncoder([(4, 4, 2), (4, 4, 2), (4, 4, 2)], width=8)
    # 64 -> 31 -> 14 -> 6
    assert encoder.frame_count(64) == 6
    assert encoder.min_samples() == 22
    with pytest.raises(ShapeError, match="minimum of 22"):
        encoder.frame_count(21)


def test_identity_conv_layer_passes_samples_through():
    encoder = ConvFeatureEncoder([(1, 1, 1)], width=4)
    params = ModelParams()
    encoder.init_params(params, np.random.default_rng(0))
    params["feature.0.conv_weight"].data = np.ones((1, 1, 1))
    wave = np.random.default_rng(1).normal(size=(2, 9))
    frames = encoder.frames(params, wave)
    assert frames.shape == (2, 1, 9)
    np.testing.assert_allclose(frames.data[:, 0], wave)


def test_token_embedding_rows():
    embed = TokenEmbed(vocab_size=3, max_positions=4, width=5)
    params = ModelParams()
    embed.init_params(params, np.random.default_rng(0))
    rows = F.embedding(params["feature.token_embed"], np.array([[0, 0]]))
    np.testing.assert_array_equal(rows.data[0, 0], rows.data[0, 1])
    with pytest.raises(DataError):
        embed(params, np.array([[3]]))
    with pytest.raises(ConfigError):
        embed(params, np.zeros((1, 5), dtype=int))


def test_select_unmasked_keeps_original_positions():
    x = np.random.default_rng(0).normal(size=(1, 4, 3))
    tokens = full_batch(x)
    selected = select_unmasked(tokens, [plan_keeping(4, {1, 3})])
    np.testing.assert_array_equal(selected.position_ids, [[1, 3]])
    np.testing.assert_array_equal(selected.tokens.data[0], x[0, [1, 3]])

    same = select_unmasked(tokens, [MaskPlan.full(Layout.line(4))])
    np.testing.assert_array_equal(same.tokens.data, x)

    with pytest.raises(ShapeError):
        select_unmasked(tokens, [plan_keeping(5, {1})])


def test_alibi_slopes_and_bias():
    slopes = alibi_slopes(8)
    assert slopes[0] == 0.5
    assert slopes[-1] == 1 / 256

    ids = np.array([[0, 2, 5]])
    bias = alibi_bias(ids, Layout.line(6), slopes, Tensor(np.ones(8)))
    assert bias.shape == (1, 8, 3, 3)
    np.testing.assert_array_equal(np.diagonal(bias.data, axis1=2, axis2=3), 0.0)
    np.testing.assert_allclose(bias.data[0, 0, 0, 2], -0.5 * 5)
    np.testing.assert_array_equal(bias.data, alibi_bias(ids, Layout.line(6), slopes).data)


def test_alibi_uses_euclidean_grid_distance_and_skips_prefix():
    ids = np.array([[0, 5]])  # (0, 0) and (1, 1) on a 4x4 grid
    bias = alibi_bias(ids, Layout.grid(4, 4), np.array([1.0]), prefix_tokens=1)
    assert bias.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(bias.data[0, 0, 1, 2], -np.sqrt(2.0))
    np.testing.assert_array_equal(bias.data[0, 0, 0], 0.0)
    np.testing.assert_array_equal(bias.data[0, 0, :, 0], 0.0)


def test_zero_depth_backbone_is_identity():
    backbone = Backbone(BackboneConfig(depth=0, width=4, heads=2))
    params = ModelParams()
    backbone.init_params(params, np.random.default_rng(0))
    tokens = full_batch(np.random.default_rng(1).normal(size=(2, 3, 4)))
    trace = backbone.encode(params, tokens, keep_trace=True)
    np.testing.assert_array_equal(trace.output.tokens.data, tokens.tokens.data)
    assert trace.ffn_outputs == []


def test_backbone_trace_and_fault_location():
    backbone = Backbone(BackboneConfig(depth=3, width=4, heads=2, alibi=True))
    params = ModelParams()
    backbone.init_params(params, np.random.default_rng(0))
    assert params["backbone.alibi_slopes"].requires_grad is False
    assert params["backbone.alibi_scalars"].requires_grad is True
    np.testing.assert_array_equal(params["backbone.alibi_scalars"].data, 1.0)

    tokens = full_batch(np.random.default_rng(1).normal(size=(2, 5, 4)))
    trace = backbone.encode(params, tokens, keep_trace=True)
    assert len(trace.ffn_outputs) == 3
    assert trace.output.tokens.shape == (2, 5, 4)

    params["backbone.1.ffn_in_weight"].data[0, 0] = np.nan
    with pytest.raises(NumericFaultError) as info:
        backbone.encode(params, tokens)
    assert info.value.where.startswith("backbone block 1")


def test_single_token_attention_is_value_projection():
    config = BackboneConfig(depth=1, width=4, heads=2)
    backbone = Backbone(config)
    params = ModelParams()
    backbone.init_params(params, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(2).normal(size=(1, 1, 4)))
    attended = backbone.attention(params, 0, x, None).data

    qkv = x.data @ params["backbone.0.attn_qkv_weight"].data + params["backbone.0.attn_qkv_bias"].data
    values = qkv[..., 8:]
    expected = values @ params["backbone.0.attn_out_weight"].data + params["backbone.0.attn_out_bias"].data
    np.testing.assert_allclose(attended, expected, atol=1e-12)


def relative_conv_inputs(width=2, length=5, kernel=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, length, width))
    weight = Tensor(rng.normal(size=(width, 1, kernel)))
    return x, weight


def test_relative_conv_ignores_masked_neighbours():
    x, weight = relative_conv_inputs()
    plans = [plan_keeping(5, {2})]
    visible = select_unmasked(full_batch(x), plans)
    out = masked_relative_conv(visible, plans, weight)
    np.testing.assert_allclose(out.tokens.data[0, 0], weight.data[:, 0, 1] * x[0, 2])


def test_relative_conv_without_masking_is_depthwise_conv():
    x, weight = relative_conv_inputs()
    plans = [MaskPlan.full(Layout.line(5))]
    out = masked_relative_conv(full_batch(x), plans, weight)
    expected = F.grouped_conv(Tensor(x.transpose(0, 2, 1)), weight, groups=2).data.transpose(0, 2, 1)
    np.testing.assert_allclose(out.tokens.data, expected, atol=1e-12)


def test_relative_conv_unit_kernel_is_mask_independent():
    x, weight = relative_conv_inputs(kernel=1)
    plans = sample_plans(MaskConfig(mask_ratio=0.6, block_size=2), Layout.line(5), 1, 1, seed=0, step=0)[0]
    visible = select_unmasked(full_batch(x), plans)
    out = masked_relative_conv(visible, plans, weight)
    expected = x[0, plans[0].kept_indices()] * weight.data[:, 0, 0]
    np.testing.assert_allclose(out.tokens.data[0], expected, atol=1e-12)


def test_relative_conv_rejects_grids():
    tokens = TokenBatch.full(Tensor(np.zeros((1, 4, 2))), Layout.grid(2, 2))
    with pytest.raises(ConfigError):
        masked_relative_conv(tokens, [MaskPlan.full(Layout.grid(2, 2))], Tensor(np.zeros((2, 1, 3))))


def tiny_image_encoder(**features):
    return Encoder(
        Modality.IMAGE,
        FeatureConfig(channels=1, image_size=(8, 8), patch=2, **features),
        BackboneConfig(depth=2, width=8, heads=2),
    )


def test_encoder_masked_sees_only_visible_positions():
    encoder = tiny_image_encoder(cls_token=True)
    params = ModelParams()
    encoder.init_params(params, np.random.default_rng(0))
    images = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
    features = encoder.features(params, images)
    assert features.layout.shape == (4, 4)

    plans = sample_plans(MaskConfig(), features.layout, 2, 1, seed=0, step=0)[0]
    trace = encoder.encode_masked(params, features, plans)
    assert trace.output.length == 3
    assert trace.cls.shape == (2, 8)
    np.testing.assert_array_equal(trace.output.position_ids[1], plans[1].kept_indices())

    full = encoder.encode_full(params, features, keep_trace=True)
    assert full.output.length == 16
    assert len(full.ffn_outputs) == 2


@pytest.mark.parametrize("alibi", [False, True])
def test_every_encoder_parameter_gets_a_gradient(alibi):
    encoder = Encoder(
        Modality.IMAGE,
        FeatureConfig(channels=1, image_size=(8, 8), patch=2, cls_token=True),
        BackboneConfig(depth=2, width=8, heads=2, alibi=alibi),
    )
    params = ModelParams()
    encoder.init_params(params, np.random.default_rng(0))
    images = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
    plans = sample_plans(MaskConfig(mask_ratio=0.5, block_size=2), Layout.grid(4, 4), 2, 1, seed=0, step=0)[0]
    rng = np.random.default_rng(2)
    readout = Tensor(rng.normal(size=(2, 8, 8)))
    cls_readout = Tensor(rng.normal(size=(2, 8)))

    def objective():
        trace = encoder.encode_masked(params, encoder.features(params, images), plans)
        return (trace.output.tokens * readout).sum() + (trace.cls * cls_readout).sum()

    grads = grad_of(objective, params.trainable())
    assert set(grads) == set(params.trainable())
    dead = [name for name, grad in grads.items() if not np.any(grad)]
    assert dead == []
    assert ("backbone.alibi_scalars" in grads) == alibi


def test_encoder_modality_guards():
    with pytest.raises(ConfigError):
        Encoder(Modality.SPEECH, FeatureConfig(cls_token=True), BackboneConfig(depth=1, width=8, heads=2))
    with pytest.raises(ConfigError):
        tiny_image_encoder(rel_conv_kernel=3)
    with pytest.raises(ConfigError):
        Encoder(Modality.TEXT, FeatureConfig(), BackboneConfig(depth=1, width=8, heads=2))
