"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

import math
from typing import Dict, Mapping, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ctxlearn.exceptions import StructuralError
from ctxlearn.network.params import ModelParams, check_same_names


class OptimConfig(BaseModel):
    """Optimizer and schedule settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(1e-3, ge=0.0)
    min_lr: float = Field(0.0, ge=0.0)
    warmup_fraction: float = Field(0.05, ge=0.0, le=1.0)
    weight_decay: float = Field(0.05, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = Field(1e-6, gt=0.0)


def lr_at(config: OptimConfig, step: int, total_steps: int) -> float:
    """Linear warmup to ``lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    warmup = int(config.warmup_fraction * total_steps)
    if warmup and step < warmup:
        return config.lr * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """
    Adam moments with weight decay applied directly to the weights.

    Only tensors with two or more dimensions are decayed; biases, norms,
    position tables of rank 1 and scalars are not. Tensors without a
    gradient this step are skipped.
    """

    def __init__(self, params: ModelParams, config: OptimConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        trainable = params.trainable()
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in trainable.items()}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(t.data) for n, t in trainable.items()}

    def step(self, lr: float) -> None:
        beta1, beta2 = self.config.betas
        self.step_count += 1
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count
        for name, tensor in self.params.trainable().items():
            grad = tensor.grad
            if grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * grad
            v *= beta2
            v += (1.0 - beta2) * grad * grad
            if lr == 0.0:
                continue
            update = (m / bias1) / (np.sqrt(v / bias2) + self.config.eps)
            if tensor.ndim >= 2 and self.config.weight_decay:
                update = update + self.config.weight_decay * tensor.data
            tensor.data = tensor.data - lr * update

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moments as ``m.<name>`` / ``v.<name>`` entries."""
        state = {f"m.{n}": a.copy() for n, a in self.m.items()}
        state.update({f"v.{n}": a.copy() for n, a in self.v.items()})
        return state

    def load_state_arrays(self, state: Mapping[str, np.ndarray], step_count: int) -> None:
        expected = [f"m.{n}" for n in self.m] + [f"v.{n}" for n in self.v]
        check_same_names(expected, state.keys(), "optimizer state does not match the parameters")
        for name in self.m:
            for prefix, store in (("m", self.m), ("v", self.v)):
                array = state[f"{prefix}.{name}"]
                if array.shape != store[name].shape:
                    raise StructuralError(f"optimizer {prefix} for {name} has shape {array.shape}")
                store[name] = np.array(array, dtype=store[name].dtype)
        self.step_count = step_count
