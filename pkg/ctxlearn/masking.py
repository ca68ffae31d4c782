"""Mask plans: random, block and inverse block masking with exact-count assimilation."""

import enum
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ctxlearn.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

# Adjust values in this open interval are known to behave well
ADJUST_RANGE = (0.05, 0.15)

# Guards floor() against values like 10 * (1 - 0.8) = 1.9999999999999996
_FLOOR_EPS = 1e-9


def _floor(value: float) -> int:
    return int(math.floor(value + _FLOOR_EPS))


class Strategy(str, enum.Enum):
    """Masking strategy."""
    RANDOM = "random"
    BLOCK = "block"
    INVERSE_BLOCK = "inverse_block"


class Layout(BaseModel):
    """A 1-D sequence of L positions or a 2-D grid of H_p x W_p patches (row-major)."""

    model_config = ConfigDict(frozen=True)

    shape: Tuple[int, ...]

    @field_validator("shape")
    @classmethod
    def _check_shape(cls, shape):
        if len(shape) not in (1, 2) or any(extent < 1 for extent in shape):
            raise ValueError(f"layout must be 1-D or 2-D with positive extents, got {shape}")
        return shape

    @classmethod
    def line(cls, length: int) -> "Layout":
        return cls(shape=(length,))

    @classmethod
    def grid(cls, height: int, width: int) -> "Layout":
        return cls(shape=(height, width))

    @property
    def length(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_grid(self) -> bool:
        return len(self.shape) == 2

    def coordinates(self) -> np.ndarray:
        """``[L, ndim]`` integer coordinates of every position."""
        if self.is_grid:
            rows, cols = np.divmod(np.arange(self.length), self.shape[1])
            return np.stack([rows, cols], axis=1)
        return np.arange(self.length)[:, None]


class MaskConfig(BaseModel):
    """How mask plans are drawn."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    strategy: Strategy = Strategy.INVERSE_BLOCK
    mask_ratio: float = Field(0.8, ge=0.0, le=1.0)      # R
    adjust: float = Field(0.1, ge=0.0)                  # A
    block_size: int = Field(3, ge=1)                    # B
    block_side: Optional[int] = Field(None, ge=1)       # b for grids; round(sqrt(B)) when unset

    @model_validator(mode="after")
    def _warn_adjust(self):
        low, high = ADJUST_RANGE
        if self.strategy != Strategy.RANDOM and not low < self.adjust < high:
            logger.warning(f"adjust A={self.adjust} is outside ({low}, {high})")
        return self

    @property
    def side(self) -> int:
        if self.block_side is not None:
            return self.block_side
        return max(1, _floor(math.sqrt(self.block_size) + 0.5))


class MaskPlan:
    """Per-sample keep/mask assignment; ``kept[i]`` is True when position i is visible to the student."""

    __slots__ = ("layout", "kept")

    def __init__(self, layout: Layout, kept: np.ndarray):
        kept = np.array(kept, dtype=bool).reshape(-1)
        if kept.size != layout.length:
            raise ShapeError(f"plan has {kept.size} entries for a layout of {layout.length}")
        kept.setflags(write=False)
        self.layout = layout
        self.kept = kept

    @classmethod
    def full(cls, layout: Layout) -> "MaskPlan":
        return cls(layout, np.ones(layout.length, dtype=bool))

    @property
    def kept_count(self) -> int:
        return int(self.kept.sum())

    @property
    def masked_count(self) -> int:
        return self.layout.length - self.kept_count

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept)

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.kept)

    def as_grid(self) -> np.ndarray:
        return self.kept.reshape(self.layout.shape)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MaskPlan)
            and self.layout == other.layout
            and np.array_equal(self.kept, other.kept)
        )

    def __repr__(self) -> str:
        return f"MaskPlan(layout={self.layout.shape}, kept={self.kept_count}/{self.layout.length})"


def target_kept(length: int, mask_ratio: float) -> int:
    """Number of visible positions every plan ends with: floor(L * (1 - R))."""
    return _floor(length * (1.0 - mask_ratio))


def count_start_points(length: int, mask_ratio: float, adjust: float, block_size: int) -> int:
    """floor(L * ((1 - R) + A) / B), clamped to [0, L]."""
    if length < 1 or block_size < 1:
        raise ConfigError(f"need L >= 1 and B >= 1, got L={length}, B={block_size}")
    share = (1.0 - mask_ratio) + adjust
    if share < 0:
        raise ConfigError(f"(1 - R) + A must be non-negative, got {share}")
    return min(max(_floor(length * share / block_size), 0), length)


def _extent(center: int, width: int, limit: int) -> Tuple[int, int]:
    """
    ``[low, high)`` of a block of ``width`` centred on ``center`` inside ``[0, limit)``.

    A block that would cross an edge is shifted inward rather than clipped, so it keeps
    its full width and stays contiguous; it is cut only when ``width > limit``.
    """
    low = center - (width - 1) // 2
    low = min(max(low, 0), max(limit - width, 0))
    return low, min(low + width, limit)


def sample_blocks(config: MaskConfig, layout: Layout, rng: np.random.Generator) -> MaskPlan:
    """Draw the block structure of a plan, before assimilation."""
    length = layout.length
    if config.strategy == Strategy.RANDOM:
        return MaskPlan.full(layout)

    side = config.side
    if layout.is_grid and side > min(layout.shape):
        raise ConfigError(f"block side {side} does not fit a {layout.shape[0]}x{layout.shape[1]} grid")

    if config.strategy == Strategy.INVERSE_BLOCK:
        starts = count_start_points(length, config.mask_ratio, config.adjust, config.block_size)
        base, fill = False, True
    else:
        starts = min(max(_floor(length * (config.mask_ratio + config.adjust) / config.block_size), 0), length)
        base, fill = True, False

    kept = np.full(layout.shape, base, dtype=bool)
    for start in rng.choice(length, size=starts, replace=False):
        if layout.is_grid:
            row, col = divmod(int(start), layout.shape[1])
            r0, r1 = _extent(row, side, layout.shape[0])
            c0, c1 = _extent(col, side, layout.shape[1])
            kept[r0:r1, c0:c1] = fill
        else:
            lo, hi = _extent(int(start), config.block_size, length)
            kept[lo:hi] = fill
    return MaskPlan(layout, kept)


def assimilate(plan: MaskPlan, target: int, rng: np.random.Generator) -> MaskPlan:
    """Flip uniformly chosen positions until exactly ``target`` are kept."""
    length = plan.layout.length
    if not 0 <= target <= length:
        raise ConfigError(f"target kept count {target} outside [0, {length}]")
    excess = plan.kept_count - target
    if excess == 0:
        return plan
    kept = plan.kept.copy()
    if excess > 0:
        kept[rng.choice(plan.kept_indices(), size=excess, replace=False)] = False
    else:
        kept[rng.choice(plan.masked_indices(), size=-excess, replace=False)] = True
    return MaskPlan(plan.layout, kept)


def sample_mask(config: MaskConfig, layout: Layout, rng: np.random.Generator) -> MaskPlan:
    """Draw a plan with exactly floor(L * (1 - R)) kept positions."""
    plan = sample_blocks(config, layout, rng)
    return assimilate(plan, target_kept(layout.length, config.mask_ratio), rng)


def plan_rng(seed: int, step: int, sample_index: int, mask_index: int) -> np.random.Generator:
    """Generator for one plan, derived only from (seed, step, sample, mask)."""
    return np.random.default_rng(np.random.SeedSequence([seed, step, sample_index, mask_index]))


def sample_plans(
    config: MaskConfig,
    layout: Layout,
    batch_size: int,
    num_masks: int,
    seed: int,
    step: int,
) -> List[List[MaskPlan]]:
    """``plans[m][b]``: mask version m of sample b, each an independent draw."""
    return [
        [sample_mask(config, layout, plan_rng(seed, step, b, m)) for b in range(batch_size)]
        for m in range(num_masks)
    ]


def kept_index_matrix(plans: Sequence[MaskPlan]) -> np.ndarray:
    """``[batch, kept]`` positions of a batch of plans that all keep the same count."""
    counts = {plan.kept_count for plan in plans}
    if len(counts) != 1:
        raise ShapeError(f"plans in a batch keep different counts: {sorted(counts)}")
    return np.stack([plan.kept_indices() for plan in plans])


def pack_plans(plans: Sequence[MaskPlan]) -> np.ndarray:
    """Bit-pack plans into ``[n, ceil(L / 8)]`` uint8 rows."""
    return np.packbits(np.stack([plan.kept for plan in plans]), axis=1)


def unpack_plans(packed: np.ndarray, layout: Layout) -> List[MaskPlan]:
    rows = np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=1, count=layout.length)
    return [MaskPlan(layout, row.astype(bool)) for row in rows]
