"""Modality feature encoders: image patches, raw waveform convolutions, token embeddings."""

from typing import Sequence, Tuple

import numpy as np

from ctxlearn.core import functional as F
from ctxlearn.core.tensor import Tensor
from ctxlearn.exceptions import ConfigError, ShapeError
from ctxlearn.masking import Layout
from ctxlearn.network.params import ModelParams, normal, xavier
from ctxlearn.network.tokens import TokenBatch


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[batch, C, H, W]`` -> ``[batch, (H/p)(W/p), C*p*p]`` in row-major patch order."""
    batch, channels, height, width = images.shape
    if height % patch or width % patch:
        raise ConfigError(f"image {height}x{width} is not divisible by patch size {patch}")
    rows, cols = height // patch, width // patch
    x = images.reshape(batch, channels, rows, patch, cols, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(batch, rows * cols, channels * patch * patch)


class PatchEmbed:
    """Linear map of each p x p patch plus a learned absolute position embedding."""

    def __init__(self, channels: int, image_size: Tuple[int, int], patch: int, width: int):
        height, image_width = image_size
        if height % patch or image_width % patch:
            raise ConfigError(f"image {height}x{image_width} is not divisible by patch size {patch}")
        self.channels = channels
        self.image_size = (height, image_width)
        self.patch = patch
        self.width = width
        self.layout = Layout.grid(height // patch, image_width // patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def init_params(self, params: ModelParams, rng: np.random.Generator) -> None:
        params.add("feature.patch_weight", xavier(rng, self.patch_dim, self.width))
        params.add("feature.patch_bias", np.zeros(self.width))
        params.add("feature.pos_embed", normal(rng, (self.layout.length, self.width)))

    def __call__(self, params, images: np.ndarray) -> TokenBatch:
        if images.ndim != 4 or images.shape[1] != self.channels:
            raise ShapeError(f"expected images [batch, {self.channels}, H, W], got {images.shape}")
        height, width = images.shape[2:]
        if height % self.patch or width % self.patch:
            raise ConfigError(f"image {height}x{width} is not divisible by patch size {self.patch}")
        if (height, width) != self.image_size:
            raise ConfigError(f"image size {height}x{width} differs from configured {self.image_size}")
        patches = Tensor(patchify(images, self.patch))
        tokens = F.linear(patches, params["feature.patch_weight"], params["feature.patch_bias"])
        return TokenBatch.full(tokens + params["feature.pos_embed"], self.layout)


class ConvFeatureEncoder:
    """
    Multi-layer strided 1-D convolution over raw samples.

    Each layer is ``(channels, kernel, stride)``; GELU sits between layers.
    The last layer's frames are layer-normalized and projected to the model width.
    """

    def __init__(self, layers: Sequence[Tuple[int, int, int]], width: int):
        if not layers:
            raise ConfigError("the convolutional feature encoder needs at least one layer")
        self.layers = [tuple(int(v) for v in layer) for layer in layers]
        self.width = width

    def min_samples(self) -> int:
        """Shortest input that still yields one frame."""
        needed = 1
        for _, kernel, stride in reversed(self.layers):
            needed = (needed - 1) * stride + kernel
        return needed

    def frame_count(self, samples: int) -> int:
        if samples < self.min_samples():
            raise ShapeError(
                f"input of {samples} samples is shorter than the minimum of {self.min_samples()} samples"
            )
        length = samples
        for _, kernel, stride in self.layers:
            length = (length - kernel) // stride + 1
        return length

    def init_params(self, params: ModelParams, rng: np.random.Generator) -> None:
        in_channels = 1
        for i, (channels, kernel, _) in enumerate(self.layers):
            params.add(f"feature.{i}.conv_weight", xavier(rng, in_channels * kernel, channels, (channels, in_channels, kernel)))
            in_channels = channels
        params.add("feature.norm_weight", np.ones(in_channels))
        params.add("feature.norm_bias", np.zeros(in_channels))
        params.add("feature.proj_weight", xavier(rng, in_channels, self.width))
        params.add("feature.proj_bias", np.zeros(self.width))

    def frames(self, params, wave: np.ndarray) -> Tensor:
        """Conv stack output ``[batch, channels, frames]`` before normalization."""
        if wave.ndim != 2:
            raise ShapeError(f"expected waveforms [batch, samples], got {wave.shape}")
        self.frame_count(wave.shape[1])
        x = Tensor(wave[:, None, :])
        for i, (_, _, stride) in enumerate(self.layers):
            x = F.conv1d(x, params[f"feature.{i}.conv_weight"], stride)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x

    def __call__(self, params, wave: np.ndarray) -> TokenBatch:
        x = self.frames(params, wave).transpose(0, 2, 1)
        x = F.layer_norm(x, params["feature.norm_weight"], params["feature.norm_bias"])
        tokens = F.linear(x, params["feature.proj_weight"], params["feature.proj_bias"])
        return TokenBatch.full(tokens, Layout.line(tokens.shape[1]))


class TokenEmbed:
    """Learned embedding lookup plus learned absolute positions."""

    def __init__(self, vocab_size: int, max_positions: int, width: int):
        if vocab_size < 1:
            raise ConfigError("vocabulary must hold at least one token")
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.width = width

    def init_params(self, params: ModelParams, rng: np.random.Generator) -> None:
        params.add("feature.token_embed", normal(rng, (self.vocab_size, self.width)))
        params.add("feature.pos_embed", normal(rng, (self.max_positions, self.width)))

    def __call__(self, params, ids: np.ndarray) -> TokenBatch:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"expected token ids [batch, positions], got {ids.shape}")
        length = ids.shape[1]
        if length > self.max_positions:
            raise ConfigError(f"sequence of {length} tokens exceeds max_positions={self.max_positions}")
        tokens = F.embedding(params["feature.token_embed"], ids)
        tokens = tokens + params["feature.pos_embed"][:length]
        return TokenBatch.full(tokens, Layout.line(length))
