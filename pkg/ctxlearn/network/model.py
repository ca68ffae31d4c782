"""Modality encoder: feature encoder, optional relative conv and CLS token, shared backbone."""

import enum
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ctxlearn.core import functional as F
from ctxlearn.core.tensor import Tensor
from ctxlearn.exceptions import ConfigError
from ctxlearn.masking import MaskPlan
from ctxlearn.network.backbone import Backbone, BackboneConfig, masked_relative_conv, select_unmasked
from ctxlearn.network.feature_encoders import ConvFeatureEncoder, PatchEmbed, TokenEmbed
from ctxlearn.network.params import ModelParams, normal
from ctxlearn.network.tokens import EncodeTrace, TokenBatch

logger = logging.getLogger(__name__)

# Everything the EMA teacher mirrors; the decoder has no teacher twin
ENCODER_PREFIXES = ("feature.", "encoder.", "backbone.")


class Modality(str, enum.Enum):
    """Input modality."""
    IMAGE = "image"
    SPEECH = "speech"
    TEXT = "text"


class FeatureConfig(BaseModel):
    """Feature-encoder settings; only the fields of the run's modality are used."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # image
    channels: int = Field(3, ge=1)
    image_size: Tuple[int, int] = (32, 32)
    patch: int = Field(4, ge=1)
    cls_token: bool = False

    # speech: (channels, kernel, stride) per layer
    conv_layers: List[Tuple[int, int, int]] = [(32, 10, 5), (32, 3, 2), (32, 3, 2)]
    rel_conv_kernel: int = Field(0, ge=0)

    # text
    vocab_size: int = Field(0, ge=0)
    max_positions: int = Field(512, ge=1)

    @field_validator("rel_conv_kernel")
    @classmethod
    def _odd_kernel(cls, kernel):
        if kernel and kernel % 2 == 0:
            raise ValueError(f"rel_conv_kernel must be odd, got {kernel}")
        return kernel


class Encoder:
    """
    The student (and, with teacher weights, the teacher) encoder for one modality.

    ``features`` runs the feature encoder once; its output is shared by every
    mask version. ``encode_full`` encodes the whole sample, ``encode_masked``
    only the visible positions of each plan.
    """

    def __init__(self, modality: Modality, features: FeatureConfig, backbone: BackboneConfig):
        self.modality = Modality(modality)
        self.feature_config = features
        self.backbone = Backbone(backbone)
        width = backbone.width

        if self.modality == Modality.IMAGE:
            self.feature_encoder = PatchEmbed(features.channels, features.image_size, features.patch, width)
        elif self.modality == Modality.SPEECH:
            self.feature_encoder = ConvFeatureEncoder(features.conv_layers, width)
        else:
            if features.vocab_size < 1:
                raise ConfigError("text runs need features.vocab_size >= 1")
            self.feature_encoder = TokenEmbed(features.vocab_size, features.max_positions, width)

        if features.cls_token and self.modality != Modality.IMAGE:
            raise ConfigError("the CLS token is only supported for images")
        if features.rel_conv_kernel and self.modality != Modality.SPEECH:
            raise ConfigError("the masked relative convolution is only supported for speech")

    @property
    def width(self) -> int:
        return self.backbone.config.width

    @property
    def depth(self) -> int:
        return self.backbone.config.depth

    @property
    def has_cls(self) -> bool:
        return self.feature_config.cls_token

    def init_params(self, params: ModelParams, rng: np.random.Generator) -> None:
        self.feature_encoder.init_params(params, rng)
        kernel = self.feature_config.rel_conv_kernel
        if kernel:
            params.add("encoder.rel_conv_weight", normal(rng, (self.width, 1, kernel), std=1.0 / kernel))
            params.add("encoder.rel_conv_bias", np.zeros(self.width))
        if self.has_cls:
            params.add("encoder.cls_token", normal(rng, (1, 1, self.width)))
        self.backbone.init_params(params, rng)

    def features(self, params, inputs: np.ndarray) -> TokenBatch:
        return self.feature_encoder(params, inputs)

    def _prefix(self, params, batch_size: int) -> Optional[Tensor]:
        if not self.has_cls:
            return None
        return params["encoder.cls_token"] + Tensor(np.zeros((batch_size, 1, self.width)))

    def _encode(self, params, tokens: TokenBatch, plans: Sequence[MaskPlan], keep_trace: bool,
                meter, component: str) -> EncodeTrace:
        if self.feature_config.rel_conv_kernel:
            conv = masked_relative_conv(tokens, plans, params["encoder.rel_conv_weight"], params["encoder.rel_conv_bias"])
            tokens = tokens.with_tokens(tokens.tokens + F.gelu(conv.tokens))
        return self.backbone.encode(
            params, tokens, keep_trace, self._prefix(params, tokens.batch_size), meter, component
        )

    def encode_full(self, params, features: TokenBatch, keep_trace: bool = False,
                    meter=None, component: str = "teacher") -> EncodeTrace:
        plans = [MaskPlan.full(features.layout)] * features.batch_size
        return self._encode(params, features, plans, keep_trace, meter, component)

    def encode_masked(self, params, features: TokenBatch, plans: Sequence[MaskPlan],
                      meter=None, component: str = "student") -> EncodeTrace:
        visible = select_unmasked(features, plans)
        return self._encode(params, visible, plans, False, meter, component)
