from typing import List, Optional

import numpy as np

from ctxlearn.core.tensor import Tensor
from ctxlearn.exceptions import ShapeError
from ctxlearn.masking import Layout


class TokenBatch:
    """
    Token stream of a batch together with where each token sits in the full layout.

    ``tokens`` is ``[batch, positions, width]``; ``position_ids[b, j]`` is the
    original index of token j of sample b, so distances stay true after
    unmasked-only selection.
    """

    def __init__(self, tokens: Tensor, position_ids: np.ndarray, layout: Layout):
        position_ids = np.asarray(position_ids, dtype=np.int64)
        if tokens.ndim != 3 or position_ids.shape != tokens.shape[:2]:
            raise ShapeError(f"tokens {tokens.shape} and position ids {position_ids.shape} do not line up")
        if position_ids.shape[1] > layout.length:
            raise ShapeError(f"{position_ids.shape[1]} tokens exceed layout of {layout.length}")
        if position_ids.shape[1] > 1 and np.any(np.diff(position_ids, axis=1) <= 0):
            raise ShapeError("position ids must be strictly increasing per sample")
        self.tokens = tokens
        self.position_ids = position_ids
        self.layout = layout

    @classmethod
    def full(cls, tokens: Tensor, layout: Layout) -> "TokenBatch":
        ids = np.broadcast_to(np.arange(layout.length), tokens.shape[:2])
        return cls(tokens, ids, layout)

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    @property
    def is_full(self) -> bool:
        return self.length == self.layout.length

    def with_tokens(self, tokens: Tensor) -> "TokenBatch":
        return TokenBatch(tokens, self.position_ids, self.layout)


class EncodeTrace:
    """Backbone output plus the per-block FFN outputs kept for target building."""

    def __init__(self, output: TokenBatch, ffn_outputs: Optional[List[Tensor]] = None,
                 cls: Optional[Tensor] = None):
        self.output = output
        self.ffn_outputs = ffn_outputs or []
        self.cls = cls
