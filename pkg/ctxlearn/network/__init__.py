# Network package: feature encoders, backbone and the modality encoder
from ctxlearn.network.backbone import (
    Backbone,
    BackboneConfig,
    alibi_bias,
    alibi_slopes,
    masked_relative_conv,
    select_unmasked,
)
from ctxlearn.network.feature_encoders import ConvFeatureEncoder, PatchEmbed, TokenEmbed, patchify
from ctxlearn.network.model import ENCODER_PREFIXES, Encoder, FeatureConfig, Modality
from ctxlearn.network.params import ModelParams
from ctxlearn.network.tokens import EncodeTrace, TokenBatch
