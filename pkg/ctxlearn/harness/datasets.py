"""Dataset ingestion: synthetic generators and the on-disk image, audio and text formats."""

import logging
import math
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf

from ctxlearn.core.tensor import get_default_dtype
from ctxlearn.exceptions import ConfigError, DataError, DataFormatError
from ctxlearn.network.model import FeatureConfig, Modality

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b"CTXIMG01"
IMAGE_HEADER = struct.Struct("<8sIIII")         # magic, count, C, H, W

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SYNTHETIC_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
SAMPLE_RATE = 16000
SHAPE_CLASSES = 10

# Seed-sequence slots for dataset randomness, kept apart from training streams
_GENERATOR_STREAM = 11
_SUBSAMPLE_STREAM = 12
_SPLIT_STREAM = 13


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


class Dataset:
    """
    Model inputs for one modality plus optional integer labels.

    ``inputs`` is float ``[n, C, H, W]`` for images, float ``[n, samples]``
    for speech and int ``[n, seq_len]`` token ids (padded with 0) for text.
    """

    def __init__(self, modality: Modality, inputs: np.ndarray, labels: Optional[np.ndarray] = None,
                 num_classes: int = 0, vocab: Optional[List[str]] = None):
        if labels is not None and len(labels) != len(inputs):
            raise DataError(f"{len(labels)} labels for {len(inputs)} samples")
        self.modality = Modality(modality)
        self.inputs = inputs
        self.labels = labels
        self.num_classes = num_classes
        self.vocab = vocab

    def __len__(self) -> int:
        return len(self.inputs)

    def take(self, indices: np.ndarray) -> "Dataset":
        labels = self.labels[indices] if self.labels is not None else None
        return Dataset(self.modality, self.inputs[indices], labels, self.num_classes, self.vocab)

    def subsample(self, ratio: float, seed: int) -> "Dataset":
        """Deterministically keep ``floor(n * ratio)`` samples (at least one)."""
        if not 0.0 < ratio <= 1.0:
            raise ConfigError(f"subsample ratio must be in (0, 1], got {ratio}")
        if ratio == 1.0:
            return self
        keep = max(1, int(math.floor(len(self) * ratio)))
        indices = np.sort(_rng(seed, _SUBSAMPLE_STREAM).permutation(len(self))[:keep])
        logger.info(f"Subsampled {len(self)} -> {keep} samples (ratio {ratio})")
        return self.take(indices)

    def split(self, fraction: float, seed: int) -> Tuple["Dataset", "Dataset"]:
        """(train, held-out) with ``floor(n * fraction)`` held out."""
        order = _rng(seed, _SPLIT_STREAM).permutation(len(self))
        held = int(math.floor(len(self) * fraction))
        return self.take(np.sort(order[held:])), self.take(np.sort(order[:held]))


def balanced_labels(count: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(count) % classes)


# ---- images ----

def _shape_mask(label: int, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    ay, ax = np.abs(dy), np.abs(dx)
    box = np.maximum(ay, ax)
    dist = np.sqrt(dy * dy + dx * dx)
    if label == 0:
        return box <= r
    if label == 1:
        return dist <= r
    if label == 2:
        return (dist <= r) & (dist >= 0.6 * r)
    if label == 3:
        return (ay <= 0.3 * r) & (ax <= 1.2 * r)
    if label == 4:
        return (ax <= 0.3 * r) & (ay <= 1.2 * r)
    if label == 5:
        return ((ay <= 0.25 * r) & (ax <= r)) | ((ax <= 0.25 * r) & (ay <= r))
    if label == 6:
        return (np.abs(ay - ax) <= 0.25 * r) & (box <= r)
    if label == 7:
        return (dy >= -r) & (dy <= r) & (ax <= (dy + r) / 2)
    if label == 8:
        return (box <= r) & (box >= 0.65 * r)
    cells = np.floor((dy + r) / (r / 2)) + np.floor((dx + r) / (r / 2))
    return (box <= r) & (cells % 2 == 0)


def synthetic_images(count: int, channels: int, size: Tuple[int, int], classes: int,
                     seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Shapes on noisy backgrounds; class = shape. Returns (uint8 [n, C, H, W], labels)."""
    if classes > SHAPE_CLASSES:
        raise ConfigError(f"the synthetic image generator has {SHAPE_CLASSES} shape classes, {classes} requested")
    rng = _rng(seed, _GENERATOR_STREAM)
    height, width = size
    labels = balanced_labels(count, classes, rng)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    images = np.empty((count, channels, height, width), dtype=np.uint8)
    for i, label in enumerate(labels):
        cy = rng.uniform(0.35, 0.65) * height
        cx = rng.uniform(0.35, 0.65) * width
        r = rng.uniform(0.2, 0.32) * min(height, width)
        mask = _shape_mask(int(label), yy - cy, xx - cx, r)
        background = rng.uniform(0, 90, size=channels)
        foreground = rng.uniform(150, 255, size=channels)
        canvas = np.where(mask[None], foreground[:, None, None], background[:, None, None])
        canvas = canvas + rng.normal(0.0, 12.0, size=canvas.shape)
        images[i] = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return images, labels


def images_to_float(images: np.ndarray) -> np.ndarray:
    """uint8 pixels -> [-1, 1]."""
    return images.astype(get_default_dtype()) / 127.5 - 1.0


def write_image_file(path: Path, images: np.ndarray) -> None:
    """Write uint8 ``[n, C, H, W]`` in the flat binary format."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise DataError(f"expected uint8 [n, C, H, W], got {images.dtype} {images.shape}")
    count, channels, height, width = images.shape
    with open(path, "wb") as handle:
        handle.write(IMAGE_HEADER.pack(IMAGE_MAGIC, count, channels, height, width))
        handle.write(np.ascontiguousarray(images).tobytes())


def read_image_file(path: Path) -> np.ndarray:
    """Read the flat binary image format; malformed files raise with the byte offset."""
    data = Path(path).read_bytes()
    if len(data) < IMAGE_HEADER.size:
        raise DataFormatError(f"{path}: truncated header of {len(data)} bytes", offset=len(data))
    magic, count, channels, height, width = IMAGE_HEADER.unpack_from(data, 0)
    if magic != IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {IMAGE_MAGIC!r}", offset=0)
    if min(channels, height, width) == 0:
        raise DataFormatError(f"{path}: zero-sized image dimensions {channels}x{height}x{width}", offset=12)
    needed = count * channels * height * width
    payload = len(data) - IMAGE_HEADER.size
    if payload < needed:
        raise DataFormatError(
            f"{path}: truncated payload, expected {needed} pixel bytes, found {payload}",
            offset=len(data),
        )
    if payload > needed:
        raise DataFormatError(f"{path}: {payload - needed} trailing bytes", offset=IMAGE_HEADER.size + needed)
    pixels = np.frombuffer(data, dtype=np.uint8, count=needed, offset=IMAGE_HEADER.size)
    return pixels.reshape(count, channels, height, width).copy()


def read_labels(path: Path, count: Optional[int] = None, classes: Optional[int] = None) -> np.ndarray:
    """One integer class id per line."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"label file {path} does not exist")
    labels = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.strip()
        if not text:
            continue
        try:
            value = int(text)
        except ValueError:
            raise DataError(f"{path}: line {number}: {text!r} is not an integer class id") from None
        if value < 0 or (classes is not None and value >= classes):
            raise DataError(f"{path}: line {number}: unknown class id {value} (classes: {classes})")
        labels.append(value)
    if count is not None and len(labels) != count:
        raise DataError(f"{path}: {len(labels)} labels for {count} samples")
    return np.asarray(labels, dtype=np.int64)


# ---- speech ----

def synthetic_speech(count: int, samples: int, classes: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Class-specific tone frequencies with harmonics and noise, normalized per waveform."""
    rng = _rng(seed, _GENERATOR_STREAM)
    labels = balanced_labels(count, classes, rng)
    t = np.arange(samples) / SAMPLE_RATE
    waves = np.empty((count, samples), dtype=np.float64)
    for i, label in enumerate(labels):
        freq = 200.0 * 1.25 ** int(label) * rng.uniform(0.97, 1.03)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * t + phase) + 0.3 * np.sin(4 * np.pi * freq * t + phase)
        waves[i] = wave + rng.normal(0.0, 0.4, size=samples)
    return normalize_waves(waves), labels


def normalize_waves(waves: np.ndarray) -> np.ndarray:
    mean = waves.mean(axis=1, keepdims=True)
    std = waves.std(axis=1, keepdims=True)
    return ((waves - mean) / np.maximum(std, 1e-5)).astype(get_default_dtype())


def fit_length(wave: np.ndarray, samples: int) -> np.ndarray:
    if len(wave) >= samples:
        return wave[:samples]
    return np.pad(wave, (0, samples - len(wave)))


def read_wav_dir(path: Path, samples: int) -> Tuple[np.ndarray, List[str]]:
    """16-bit PCM mono WAV files in name order, cropped or zero-padded to ``samples``."""
    path = Path(path)
    files = sorted(path.glob("*.wav"))
    if not files:
        raise DataError(f"no .wav files in {path}")
    waves = []
    for file in files:
        try:
            info = sf.info(str(file))
        except RuntimeError as e:
            raise DataFormatError(f"{file}: unreadable audio ({e})", offset=0) from None
        if info.subtype != "PCM_16" or info.channels != 1:
            raise DataFormatError(f"{file}: expected 16-bit PCM mono, got {info.subtype} x{info.channels}", offset=0)
        data, _ = sf.read(str(file), dtype="float64")
        waves.append(fit_length(data, samples))
    return normalize_waves(np.stack(waves)), [f.name for f in files]


# ---- text ----

def load_vocabulary(path: Path) -> List[str]:
    """One token per line, id = line number (from 0). Duplicates are rejected."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"vocabulary file {path} does not exist")
    tokens = path.read_text(encoding="utf-8").split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    seen: Dict[str, int] = {}
    for number, token in enumerate(tokens, start=1):
        if token in seen:
            raise DataError(f"{path}: duplicate token {token!r} on line {number} (first on line {seen[token]})")
        seen[token] = number
    if not tokens:
        raise DataError(f"vocabulary file {path} is empty")
    return tokens


def tokenize(text: str, index: Dict[str, int], mode: str, seq_len: int) -> np.ndarray:
    """Ids for one line, truncated or padded with id 0 to ``seq_len``."""
    pieces: Sequence[str] = list(text) if mode == "char" else text.split()
    ids = []
    for piece in pieces[:seq_len]:
        if piece in index:
            ids.append(index[piece])
        elif UNK_TOKEN in index:
            ids.append(index[UNK_TOKEN])
        else:
            raise DataError(f"token {piece!r} is not in the vocabulary and there is no {UNK_TOKEN}")
    ids.extend([0] * (seq_len - len(ids)))
    return np.asarray(ids, dtype=np.int64)


def synthetic_vocabulary() -> List[str]:
    return [PAD_TOKEN, UNK_TOKEN] + list(SYNTHETIC_ALPHABET)


def synthetic_text(count: int, seq_len: int, classes: int, seed: int) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Class-biased character sequences: each class favours its own window of letters."""
    rng = _rng(seed, _GENERATOR_STREAM)
    vocab = synthetic_vocabulary()
    letters = len(SYNTHETIC_ALPHABET)
    first = 2                                           # ids 0, 1 are <pad>, <unk>
    labels = balanced_labels(count, classes, rng)
    ids = np.empty((count, seq_len), dtype=np.int64)
    for i, label in enumerate(labels):
        window = first + (2 * int(label) + np.arange(6)) % letters
        favoured = rng.random(seq_len) < 0.7
        ids[i] = np.where(favoured, rng.choice(window, size=seq_len), rng.integers(first, first + letters, size=seq_len))
    return ids, labels, vocab


# ---- entry point ----

def ingest_dataset(spec, modality: Modality, seed: int, features: Optional[FeatureConfig] = None) -> Dataset:
    """
    Load or generate the dataset a run config names.

    Args:
        spec: DatasetSpec
        modality: Run modality
        seed: Run seed; synthetic data and subsampling derive from it
        features: Feature settings; image size and channels come from here

    Returns:
        Dataset, already subsampled by ``spec.subsample_ratio``
    """
    modality = Modality(modality)
    features = features or FeatureConfig()
    if spec.source == "file" and not Path(spec.path).exists():
        raise DataError(f"dataset path {spec.path} does not exist")

    if modality == Modality.IMAGE:
        if spec.source == "synthetic":
            pixels, labels = synthetic_images(spec.size, features.channels, tuple(features.image_size),
                                              spec.classes, seed)
        else:
            pixels = read_image_file(spec.path)
            expected = (features.channels,) + tuple(features.image_size)
            if pixels.shape[1:] != expected:
                raise ConfigError(f"{spec.path} holds {pixels.shape[1:]} images, config expects {expected}")
            labels = read_labels(spec.labels_path, len(pixels), spec.classes) if spec.labels_path else None
        dataset = Dataset(modality, images_to_float(pixels), labels, spec.classes)

    elif modality == Modality.SPEECH:
        if spec.source == "synthetic":
            waves, labels = synthetic_speech(spec.size, spec.samples, spec.classes, seed)
        else:
            waves, _ = read_wav_dir(spec.path, spec.samples)
            labels = read_labels(spec.labels_path, len(waves), spec.classes) if spec.labels_path else None
        dataset = Dataset(modality, waves, labels, spec.classes)

    else:
        if spec.source == "synthetic":
            ids, labels, vocab = synthetic_text(spec.size, spec.seq_len, spec.classes, seed)
        else:
            vocab = load_vocabulary(spec.vocab_path) if spec.vocab_path else synthetic_vocabulary()
            index = {token: i for i, token in enumerate(vocab)}
            lines = [line for line in Path(spec.path).read_text(encoding="utf-8").splitlines() if line.strip()]
            if not lines:
                raise DataError(f"text corpus {spec.path} is empty")
            ids = np.stack([tokenize(line, index, spec.tokenizer, spec.seq_len) for line in lines])
            labels = read_labels(spec.labels_path, len(ids), spec.classes) if spec.labels_path else None
        dataset = Dataset(modality, ids, labels, spec.classes, vocab)

    logger.info(f"Loaded {len(dataset)} {modality.value} samples ({spec.source})")
    return dataset.subsample(spec.subsample_ratio, seed)
