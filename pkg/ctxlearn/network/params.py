"""Named parameter storage shared by student, teacher, optimizer and checkpoints."""

from collections import OrderedDict
from typing import Dict, Iterable, Iterator, Mapping, Optional, Tuple

import numpy as np

from ctxlearn.core.tensor import Tensor, get_default_dtype
from ctxlearn.exceptions import StructuralError


class ModelParams(Mapping[str, Tensor]):
    """
    Ordered ``name -> Tensor`` map.

    Names follow ``<module>.<block idx>.<tensor>`` (``backbone.3.ffn_in_weight``)
    or ``<module>.<tensor>`` for tensors outside blocks. Frozen entries are
    stored and checkpointed but never require grad.
    """

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen = set()

    def add(self, name: str, array: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise StructuralError(f"parameter {name} registered twice")
        tensor = Tensor(np.asarray(array, dtype=get_default_dtype()), requires_grad=not frozen)
        self._tensors[name] = tensor
        if frozen:
            self.frozen.add(name)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise StructuralError(f"unknown parameter {name}") from None

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def trainable(self) -> Dict[str, Tensor]:
        return OrderedDict((n, t) for n, t in self._tensors.items() if n not in self.frozen)

    def select(self, prefixes: Tuple[str, ...]) -> Dict[str, Tensor]:
        return OrderedDict((n, t) for n, t in self._tensors.items() if n.startswith(prefixes))

    def arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((n, t.data.copy()) for n, t in self._tensors.items())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {n: t.shape for n, t in self._tensors.items()}

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def count(self, trainable_only: bool = True) -> int:
        source = self.trainable() if trainable_only else self._tensors
        return int(sum(t.size for t in source.values()))

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Replace every tensor's data; names and shapes must match exactly."""
        check_same_names(self.keys(), arrays.keys(), "parameter sets differ")
        for name, array in arrays.items():
            tensor = self._tensors[name]
            if tuple(array.shape) != tensor.shape:
                raise StructuralError(f"shape of {name} is {tuple(array.shape)}, model expects {tensor.shape}")
            tensor.data = np.array(array, dtype=tensor.dtype)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], frozen: Optional[Iterable[str]] = None) -> "ModelParams":
        """Build a store; every entry is frozen unless listed otherwise."""
        params = cls()
        frozen_names = set(arrays) if frozen is None else set(frozen)
        for name, array in arrays.items():
            params.add(name, array, frozen=name in frozen_names)
        return params


def check_same_names(expected: Iterable[str], actual: Iterable[str], message: str) -> None:
    expected, actual = set(expected), set(actual)
    if expected != actual:
        raise StructuralError(message, missing=expected - actual, unexpected=actual - expected)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)
