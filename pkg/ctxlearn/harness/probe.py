"""Linear probe on frozen, mean-pooled encoder features."""

import logging

import numpy as np
from pydantic import BaseModel

from ctxlearn.core import functional as F
from ctxlearn.core.tensor import Tensor, no_grad
from ctxlearn.exceptions import ConfigError, DataError
from ctxlearn.network.model import Encoder
from ctxlearn.network.params import ModelParams
from ctxlearn.training.optim import AdamW, OptimConfig

logger = logging.getLogger(__name__)

_PROBE_STREAM = 21


class ProbeResult(BaseModel):
    """Held-out accuracy of a linear classifier on frozen features."""

    accuracy: float
    num_classes: int
    probe_params: int
    seed: int
    train_size: int
    test_size: int


def extract_features(encoder: Encoder, params, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """``[n, width]``: final backbone outputs of the full sample, averaged over positions."""
    pooled = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            features = encoder.features(params, inputs[start:start + batch_size])
            trace = encoder.encode_full(params, features, component="probe")
            pooled.append(trace.output.tokens.data.mean(axis=1))
    return np.concatenate(pooled, axis=0)


def linear_probe(features: np.ndarray, labels: np.ndarray, num_classes: int, seed: int, config) -> ProbeResult:
    """
    Train a linear classifier on a split of ``features`` and score the rest.

    Args:
        features: ``[n, width]`` frozen features
        labels: ``[n]`` class ids in [0, num_classes)
        num_classes: Number of classes
        seed: Split and initialization seed
        config: ProbeConfig

    Returns:
        ProbeResult with held-out accuracy
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(features):
        raise DataError(f"{len(labels)} labels for {len(features)} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise DataError(f"unknown class id {bad} (classes: {num_classes})")
    count = len(labels)
    test_size = int(round(count * config.test_fraction))
    if test_size < 1 or count - test_size < 1:
        raise ConfigError(f"{count} labeled samples cannot be split with test_fraction={config.test_fraction}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, _PROBE_STREAM]))
    order = rng.permutation(count)
    test, train = order[:test_size], order[test_size:]

    mean = features[train].mean(axis=0)
    std = features[train].std(axis=0) + 1e-6
    x_train = Tensor((features[train] - mean) / std)
    x_test = (features[test] - mean) / std

    width = features.shape[1]
    params = ModelParams()
    params.add("probe.weight", rng.normal(0.0, 0.01, size=(width, num_classes)))
    params.add("probe.bias", np.zeros(num_classes))
    optimizer = AdamW(params, OptimConfig(lr=config.lr, weight_decay=config.weight_decay, warmup_fraction=0.0))

    for _ in range(config.epochs):
        params.zero_grad()
        loss = F.cross_entropy(F.linear(x_train, params["probe.weight"], params["probe.bias"]), labels[train])
        loss.backward()
        optimizer.step(config.lr)

    logits = x_test @ params["probe.weight"].data + params["probe.bias"].data
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels[test]))
    logger.info(f"Probe accuracy {accuracy:.4f} on {test_size} held-out samples ({num_classes} classes)")
    return ProbeResult(
        accuracy=accuracy,
        num_classes=num_classes,
        probe_params=params.count(),
        seed=seed,
        train_size=len(train),
        test_size=test_size,
    )


def probe_encoder(encoder: Encoder, params, dataset, seed: int, config) -> ProbeResult:
    if dataset.labels is None:
        raise DataError("probing needs labels; set dataset.labels_path or use a synthetic dataset")
    if dataset.modality != encoder.modality:
        raise ConfigError(
            f"checkpoint modality {encoder.modality.value} does not match dataset modality {dataset.modality.value}"
        )
    features = extract_features(encoder, params, dataset.inputs, config.batch_size)
    return linear_probe(features, dataset.labels, dataset.num_classes, seed, config)
