"""EMA teacher and contextualized regression targets."""

import logging
from typing import Dict, Mapping, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ctxlearn.core import functional as F
from ctxlearn.core.tensor import Tensor, no_grad
from ctxlearn.exceptions import ConfigError, StructuralError
from ctxlearn.network.model import ENCODER_PREFIXES, Encoder
from ctxlearn.network.params import ModelParams, check_same_names

logger = logging.getLogger(__name__)


class TauSchedule(BaseModel):
    """Linear EMA decay ramp from ``start`` to ``end`` over ``steps`` updates, then constant."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    start: float = Field(0.999, ge=0.0, le=1.0)     # tau_0
    end: float = Field(0.9999, ge=0.0, le=1.0)      # tau_e
    steps: int = Field(10000, ge=1)                 # tau_n

    @model_validator(mode="after")
    def _check(self):
        if self.start > self.end:
            raise ValueError(f"tau start {self.start} exceeds tau end {self.end}")
        return self


def tau_at(schedule: TauSchedule, step: int) -> float:
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    return schedule.start + (schedule.end - schedule.start) * min(step / schedule.steps, 1.0)


class TeacherState:
    """
    Name-matched copy of the student encoder weights (feature encoder + backbone).

    All teacher tensors are frozen; they change only through ``ema_update``.
    """

    def __init__(self, params: ModelParams, step: int = 0):
        self.params = params
        self.step = step

    @classmethod
    def from_student(cls, student: ModelParams) -> "TeacherState":
        arrays = {name: t.data.copy() for name, t in student.select(ENCODER_PREFIXES).items()}
        return cls(ModelParams.from_arrays(arrays))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return self.params.arrays()

    def restore(self, arrays: Mapping[str, np.ndarray], step: int) -> None:
        self.params.load_arrays(arrays)
        self.step = step


WeightMap = Mapping[str, Union[Tensor, np.ndarray]]


def ema_update(teacher: TeacherState, student_weights: WeightMap, tau: float) -> TeacherState:
    """
    Move the teacher towards the student: teacher <- tau * teacher + (1 - tau) * student.

    Args:
        teacher: Teacher to update in place
        student_weights: Student encoder tensors (or arrays) under the teacher's names;
            extra decoder entries are ignored
        tau: Decay in [0, 1]

    Returns:
        The same teacher, with ``step`` advanced by one
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    encoder_names = [name for name in student_weights if name.startswith(ENCODER_PREFIXES)]
    check_same_names(teacher.params.keys(), encoder_names, "teacher and student encoder names differ")

    for name, tensor in teacher.params.items():
        source = student_weights[name]
        source = source.data if isinstance(source, Tensor) else np.asarray(source)
        if source.shape != tensor.shape:
            raise StructuralError(f"shape of {name} is {source.shape} in the student, {tensor.shape} in the teacher")
        if tau == 1.0:
            continue
        tensor.data = tau * tensor.data + (1.0 - tau) * source
    teacher.step += 1
    return teacher


class TargetBatch:
    """Regression targets ``y[batch, L, width]`` plus how they were built."""

    def __init__(self, y: np.ndarray, top_k: int, post_ln: bool):
        self.y = y
        self.top_k = top_k
        self.post_ln = post_ln

    @property
    def cls_target(self) -> np.ndarray:
        """Mean of the targets over positions, ``[batch, width]``."""
        return self.y.mean(axis=1)

    @property
    def shape(self):
        return self.y.shape


def average_top_k(ffn_outputs, top_k: int, post_ln: bool, eps: float = 1e-5) -> np.ndarray:
    """Instance-normalize each of the last ``top_k`` FFN outputs over positions, then average."""
    if not 1 <= top_k <= len(ffn_outputs):
        raise ConfigError(f"top_k={top_k} must be in [1, {len(ffn_outputs)}]")
    total = None
    for output in ffn_outputs[-top_k:]:
        normed = F.instance_norm(output.transpose(0, 2, 1), eps).transpose(0, 2, 1)
        total = normed if total is None else total + normed
    y = total * (1.0 / top_k)
    if post_ln:
        y = F.layer_norm(y, eps=eps)
    return y.data.copy()


def build_targets(
    inputs: np.ndarray,
    teacher: TeacherState,
    encoder: Encoder,
    top_k: int,
    post_ln: bool,
    meter=None,
) -> TargetBatch:
    """
    Encode the full, unmasked sample with the teacher and turn its last
    ``top_k`` FFN outputs into targets.

    Returns:
        TargetBatch detached from every graph
    """
    if not 1 <= top_k <= encoder.depth:
        raise ConfigError(f"top_k={top_k} must be in [1, depth={encoder.depth}]")
    with no_grad():
        features = encoder.features(teacher.params, inputs)
        trace = encoder.encode_full(teacher.params, features, keep_trace=True, meter=meter, component="teacher")
        y = average_top_k(trace.ffn_outputs, top_k, post_ln)
    return TargetBatch(y, top_k, post_ln)


def assert_no_teacher_grad(teacher: TeacherState) -> None:
    leaked = [name for name, t in teacher.params.items() if t.requires_grad or t.grad is not None]
    if leaked:
        raise StructuralError("teacher tensors took part in backpropagation", unexpected=leaked)


def default_top_k(depth: int) -> int:
    return max(1, (depth + 1) // 2)


def default_post_ln(modality: str) -> bool:
    return modality != "text"
