"""Run configuration: JSON file, modality presets and field-level validation."""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ctxlearn.decoder import DecoderConfig
from ctxlearn.exceptions import ConfigError
from ctxlearn.network.backbone import BackboneConfig
from ctxlearn.network.model import FeatureConfig, Modality
from ctxlearn.training.trainer import TrainConfig

logger = logging.getLogger(__name__)


class DatasetSpec(BaseModel):
    """Where samples come from: a built-in generator or files on disk."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["synthetic", "file"] = "synthetic"
    size: int = Field(1024, ge=1)                       # synthetic sample count
    classes: int = Field(10, ge=1)
    samples: int = Field(4000, ge=1)                    # speech waveform length
    seq_len: int = Field(64, ge=1)                      # text positions

    path: Optional[Path] = None                         # image binary, WAV directory or text corpus
    labels_path: Optional[Path] = None
    vocab_path: Optional[Path] = None
    tokenizer: Literal["char", "whitespace"] = "char"

    subsample_ratio: float = Field(1.0, gt=0.0, le=1.0)
    eval_fraction: float = Field(0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self):
        if self.source == "file" and self.path is None:
            raise ValueError("file datasets need a path")
        return self


class ProbeConfig(BaseModel):
    """Linear probe on frozen, mean-pooled encoder features."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(300, ge=1)
    lr: float = Field(0.05, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    batch_size: int = Field(64, ge=1)                   # feature extraction batch


class RunConfig(BaseModel):
    """Everything one pretraining run needs. Unknown keys are rejected at every level."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    modality: Modality
    seed: int = Field(0, ge=0)
    output_dir: Optional[Path] = None

    features: FeatureConfig = FeatureConfig()
    backbone: BackboneConfig = BackboneConfig()
    decoder: DecoderConfig = DecoderConfig()
    train: TrainConfig = TrainConfig()
    dataset: DatasetSpec = DatasetSpec()
    probe: ProbeConfig = ProbeConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.train.top_k is not None and self.train.top_k > self.backbone.depth:
            raise ValueError(f"train.top_k={self.train.top_k} exceeds backbone.depth={self.backbone.depth}")
        if self.backbone.depth < 1:
            raise ValueError("backbone.depth must be at least 1 to build targets")
        if self.features.cls_token and self.modality != Modality.IMAGE:
            raise ValueError("features.cls_token is only supported for images")
        if self.features.rel_conv_kernel and self.modality != Modality.SPEECH:
            raise ValueError("features.rel_conv_kernel is only supported for speech")
        if self.train.loss.uses_cls and not self.features.cls_token:
            raise ValueError("train.loss ctx+cls needs features.cls_token")
        if self.train.loss.uses_pixels and self.modality != Modality.IMAGE:
            raise ValueError(f"train.loss {self.train.loss.value} is only defined for images")
        return self


# Desk-scale defaults per modality; file values override them key by key
PRESETS: Dict[Modality, Dict[str, Any]] = {
    Modality.IMAGE: {
        "features": {"channels": 3, "image_size": [32, 32], "patch": 4},
        "backbone": {"depth": 4, "width": 64, "heads": 4},
        "decoder": {"depth": 6, "kernel": 3, "groups": 16, "width": 64},
        "train": {"num_masks": 8, "mask": {"mask_ratio": 0.8, "block_size": 9, "adjust": 0.07}},
    },
    Modality.SPEECH: {
        "features": {"conv_layers": [[32, 10, 5], [32, 3, 2], [32, 3, 2]], "rel_conv_kernel": 9},
        "backbone": {"depth": 4, "width": 64, "heads": 4, "alibi": True},
        "decoder": {"depth": 4, "kernel": 7, "groups": 16, "width": 64},
        "train": {"num_masks": 8, "augment": False, "mask": {"mask_ratio": 0.5, "block_size": 5}},
        "dataset": {"samples": 4000},
    },
    Modality.TEXT: {
        "features": {"max_positions": 128},
        "backbone": {"depth": 4, "width": 64, "heads": 4},
        "decoder": {"depth": 4, "kernel": 7, "groups": 16, "width": 64},
        "train": {"num_masks": 8, "augment": False, "mask": {"mask_ratio": 0.42, "block_size": 3}},
        "dataset": {"seq_len": 64},
    },
}


def preset_for(modality) -> Dict[str, Any]:
    return copy.deepcopy(PRESETS[Modality(modality)])


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"  {location}: {item['msg']}")
    return "invalid run configuration:\n" + "\n".join(lines)


def validate_run_config(data: Dict[str, Any]) -> RunConfig:
    """Apply the modality preset under ``data`` and validate the result."""
    if not isinstance(data, dict):
        raise ConfigError("run configuration must be a JSON object")
    if "modality" not in data:
        raise ConfigError("invalid run configuration:\n  modality: field required")
    try:
        preset = preset_for(data["modality"])
    except ValueError:
        choices = ", ".join(m.value for m in Modality)
        raise ConfigError(f"invalid run configuration:\n  modality: must be one of {choices}") from None
    try:
        return RunConfig.model_validate(deep_merge(preset, data))
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


def load_run_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Read a JSON run configuration.

    Args:
        path: Config file
        overrides: Nested values applied on top of the file (CLI flags)

    Returns:
        Validated RunConfig
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: line {e.lineno} column {e.colno}: {e.msg}") from None
    if overrides:
        data = deep_merge(data, overrides)
    return validate_run_config(data)


def with_overrides(run: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Copy of ``run`` with nested overrides, validated again."""
    data = deep_merge(run.model_dump(mode="json"), overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


def cli_overrides(seed: Optional[int] = None, subsample_ratio: Optional[float] = None,
                  out: Optional[Path] = None) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
    if subsample_ratio is not None:
        overrides["dataset"] = {"subsample_ratio": subsample_ratio}
    if out is not None:
        overrides["output_dir"] = str(out)
    return overrides
