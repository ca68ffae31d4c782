"""Checkpoint files: a JSON header followed by raw little-endian tensors.

Layout::

    b"CTXCKPT1" | u32 header length | header JSON | tensor bytes...

The header holds ``version``, ``step``, ``optim_step``, ``config`` and a
``tensors`` list of ``{name, dtype, shape, offset, nbytes}`` in name
order; offsets are relative to the end of the header. Keys are sorted
and separators fixed, so decoding and re-encoding a file reproduces it
byte for byte.
"""

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from ctxlearn.exceptions import DataError, DataFormatError, StructuralError
from ctxlearn.masking import Layout, pack_plans, unpack_plans

logger = logging.getLogger(__name__)

MAGIC = b"CTXCKPT1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<I")

STUDENT = "student."
TEACHER = "teacher."
OPTIM = "optim."
MASKS = "masks."


class Checkpoint:
    """Step, optimizer step, run-config snapshot and named arrays."""

    def __init__(self, step: int, tensors: Mapping[str, np.ndarray], config: Optional[Dict[str, Any]] = None,
                 optim_step: int = 0, version: int = FORMAT_VERSION):
        self.step = step
        self.optim_step = optim_step
        self.config = config or {}
        self.version = version
        self.tensors = OrderedDict(sorted(tensors.items()))

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        """Entries under ``prefix`` with the prefix stripped."""
        return OrderedDict((n[len(prefix):], a) for n, a in self.tensors.items() if n.startswith(prefix))


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, array in checkpoint.tensors.items():
        array = _little_endian(np.asarray(array))
        raw = array.tobytes()
        entries.append({
            "name": name,
            "dtype": array.dtype.str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": checkpoint.version,
        "step": checkpoint.step,
        "optim_step": checkpoint.optim_step,
        "config": checkpoint.config,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_checkpoint(data: bytes) -> Checkpoint:
    prefix = len(MAGIC) + _LENGTH.size
    if len(data) < prefix:
        raise DataFormatError("checkpoint shorter than its fixed header", offset=len(data))
    if data[:len(MAGIC)] != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {data[:len(MAGIC)]!r}", offset=0)
    (length,) = _LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < prefix + length:
        raise DataFormatError("checkpoint header is truncated", offset=len(data))
    try:
        header = json.loads(data[prefix:prefix + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"checkpoint header is not valid JSON ({e})", offset=prefix) from None
    if header.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {header.get('version')}", offset=prefix)

    base = prefix + length
    tensors = OrderedDict()
    end = base
    for entry in header["tensors"]:
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(data):
            raise DataFormatError(f"tensor {entry['name']} runs past the end of the file", offset=len(data))
        dtype = np.dtype(entry["dtype"])
        tensors[entry["name"]] = np.frombuffer(data[start:stop], dtype=dtype).reshape(entry["shape"]).copy()
        end = max(end, stop)
    if end != len(data):
        raise DataFormatError(f"{len(data) - end} trailing bytes after the last tensor", offset=end)
    return Checkpoint(header["step"], tensors, header["config"], header["optim_step"], header["version"])


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint at step {checkpoint.step} to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def collect_state(trainer, step: int, config: Optional[Dict[str, Any]] = None) -> Checkpoint:
    """Snapshot student, teacher, optimizer moments and the last step's mask plans."""
    tensors: Dict[str, np.ndarray] = {}
    tensors.update({STUDENT + n: a for n, a in trainer.student.arrays().items()})
    tensors.update({TEACHER + n: a for n, a in trainer.teacher.snapshot().items()})
    tensors.update({OPTIM + n: a for n, a in trainer.optimizer.state_arrays().items()})
    for m, plans in enumerate(trainer.last_plans):
        tensors[f"{MASKS}{m}"] = pack_plans(plans)
    return Checkpoint(step, tensors, config, trainer.optimizer.step_count)


def restore_state(trainer, checkpoint: Checkpoint) -> int:
    """
    Load a checkpoint into a freshly built trainer.

    Architecture mismatches raise StructuralError naming the differing tensors.
    Stored mask plans come back as ``trainer.last_plans``, so a checkpoint written
    straight after resuming matches the one it was restored from.

    Returns:
        The step to resume from
    """
    try:
        trainer.student.load_arrays(checkpoint.group(STUDENT))
        trainer.teacher.restore(checkpoint.group(TEACHER), checkpoint.step)
        trainer.optimizer.load_state_arrays(checkpoint.group(OPTIM), checkpoint.optim_step)
    except StructuralError as e:
        raise StructuralError(f"checkpoint does not fit the configured model: {e}") from e
    masks = checkpoint.group(MASKS)
    layout = mask_layout(checkpoint)
    if masks and layout is not None:
        trainer.last_plans = [unpack_plans(masks[m], layout) for m in sorted(masks, key=int)]
    logger.info(f"Restored checkpoint at step {checkpoint.step}")
    return checkpoint.step


def mask_layout(checkpoint: Checkpoint) -> Optional[Layout]:
    shape = checkpoint.config.get("mask_layout") if checkpoint.config else None
    return Layout(shape=tuple(shape)) if shape else None
