#!/usr/bin/env python3
"""Tests for mask plans: start-point counts, block shapes, assimilation and determinism."""

import logging
import os
import sys

# Add repository root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from ctxlearn.exceptions import ConfigError, ShapeError
from ctxlearn.masking import (
    Layout,
    MaskConfig,
    MaskPlan,
    Strategy,
    assimilate,
    count_start_points,
    kept_index_matrix,
    pack_plans,
    plan_rng,
    sample_blocks,
    sample_mask,
    sample_plans,
    target_kept,
    unpack_plans,
)


@pytest.mark.parametrize(
    "length, ratio, adjust, block, expected",
    [
        (200, 0.5, 0.05, 5, 22),
        (100, 1.0, 0.0, 2, 0),
        (196, 0.8, 0.09, 4, 14),
    ],
)
def test_count_start_points(length, ratio, adjust, block, expected):
    assert count_start_points(length, ratio, adjust, block) == expected


def test_target_kept_floors_safely():
    # 10 * (1 - 0.8) is 1.9999999999999996 in floating point
    assert target_kept(10, 0.8) == 2
    assert target_kept(196, 0.8) == 39


def test_single_line_block_is_contiguous():
    config = MaskConfig(strategy=Strategy.INVERSE_BLOCK, mask_ratio=0.5, adjust=0.0, block_size=5)
    layout = Layout.line(10)
    for seed in range(200):
        plan = sample_mask(config, layout, np.random.default_rng(seed))
        kept = plan.kept_indices()
        assert (plan.kept_count, plan.masked_count) == (5, 5)
        assert kept[-1] - kept[0] == 4


def test_grid_blocks_are_unions_of_squares():
    config = MaskConfig(mask_ratio=0.8, adjust=0.1, block_size=9)
    layout = Layout.grid(8, 8)
    assert config.side == 3
    for seed in range(300):
        rng = np.random.default_rng(seed)
        raw = sample_blocks(config, layout, rng).as_grid()
        covered = np.zeros_like(raw)
        for r in range(6):
            for c in range(6):
                if raw[r:r + 3, c:c + 3].all():
                    covered[r:r + 3, c:c + 3] = True
        assert np.array_equal(covered, raw)

        plan = sample_mask(config, layout, np.random.default_rng(seed))
        assert plan.kept_count == 12


@pytest.mark.parametrize("strategy", list(Strategy))
def test_zero_ratio_keeps_everything(strategy):
    config = MaskConfig(strategy=strategy, mask_ratio=0.0, adjust=0.1, block_size=3)
    plan = sample_mask(config, Layout.line(30), np.random.default_rng(0))
    assert plan.kept.all()


@pytest.mark.parametrize("strategy", list(Strategy))
def test_exact_kept_count(strategy):
    config = MaskConfig(strategy=strategy, mask_ratio=0.8, adjust=0.07, block_size=4)
    layout = Layout.grid(14, 14)
    counts = {sample_mask(config, layout, plan_rng(3, 0, b, 0)).kept_count for b in range(50)}
    assert counts == {39}


def test_exact_kept_count_over_many_plans():
    # (percent masked, layout) -> floor(L * (100 - p) / 100) in integer arithmetic
    cases = [(p, layout) for p in (42, 50, 80) for layout in (Layout.grid(14, 14), Layout.line(37))]
    per_case = 100_000 // (len(cases) * len(Strategy)) + 1
    rng = np.random.default_rng(11)
    total = 0
    for percent, layout in cases:
        expected = layout.length * (100 - percent) // 100
        for strategy in Strategy:
            config = MaskConfig(strategy=strategy, mask_ratio=percent / 100, adjust=0.07, block_size=4)
            counts = {sample_mask(config, layout, rng).kept_count for _ in range(per_case)}
            assert counts == {expected}, (strategy, percent, layout.shape)
            total += per_case
    assert total >= 100_000


def keep_frequencies(config, layout, plans, seed):
    rng = np.random.default_rng(seed)
    counts = np.zeros(layout.length, dtype=np.int64)
    for _ in range(plans):
        counts += sample_mask(config, layout, rng).kept
    return counts


def test_unit_inverse_blocks_match_random_masking():
    layout = Layout.line(20)
    plans = 20_000
    unit = keep_frequencies(
        MaskConfig(strategy=Strategy.INVERSE_BLOCK, mask_ratio=0.5, adjust=0.07, block_size=1), layout, plans, 0
    )
    random = keep_frequencies(MaskConfig(strategy=Strategy.RANDOM, mask_ratio=0.5), layout, plans, 1)
    assert unit.sum() == random.sum() == plans * 10

    _, p_value, _, _ = stats.chi2_contingency(np.stack([unit, random]))
    assert p_value > 1e-3
    np.testing.assert_allclose(unit / plans, 0.5, atol=0.02)


def test_assimilation_picks_positions_uniformly():
    layout = Layout.line(10)
    kept = np.zeros(10, dtype=bool)
    kept[:7] = True
    plan = MaskPlan(layout, kept)
    rng = np.random.default_rng(5)
    trials = 14_000

    dropped = np.zeros(7, dtype=np.int64)
    added = np.zeros(3, dtype=np.int64)
    for _ in range(trials):
        dropped += ~assimilate(plan, 5, rng).kept[:7]
        added += assimilate(plan, 9, rng).kept[7:]
    assert dropped.sum() == 2 * trials and added.sum() == 2 * trials

    assert stats.chisquare(dropped).pvalue > 1e-3
    assert stats.chisquare(added).pvalue > 1e-3
    np.testing.assert_allclose(dropped / trials, 2 / 7, atol=0.02)
    np.testing.assert_allclose(added / trials, 2 / 3, atol=0.02)


def test_assimilate_flips_only_the_excess():
    layout = Layout.line(10)
    kept = np.zeros(10, dtype=bool)
    kept[:7] = True
    plan = MaskPlan(layout, kept)
    shrunk = assimilate(plan, 5, np.random.default_rng(0))
    assert shrunk.kept_count == 5
    assert not np.any(shrunk.kept & ~plan.kept)

    assert assimilate(plan, 7, np.random.default_rng(0)) is plan

    grown = assimilate(plan, 9, np.random.default_rng(0))
    assert grown.kept_count == 9
    assert np.all(grown.kept[:7])

    with pytest.raises(ConfigError):
        assimilate(plan, 11, np.random.default_rng(0))


def test_plans_are_deterministic_and_independent():
    config = MaskConfig()
    layout = Layout.grid(8, 8)
    first = sample_plans(config, layout, batch_size=4, num_masks=3, seed=7, step=2)
    second = sample_plans(config, layout, batch_size=4, num_masks=3, seed=7, step=2)
    assert first == second
    assert first[0][0].kept.tobytes() == second[0][0].kept.tobytes()

    versions = {first[m][0].kept.tobytes() for m in range(3)}
    assert len(versions) > 1
    assert sample_plans(config, layout, 4, 3, seed=7, step=3) != first


def test_pack_and_kept_index_matrix():
    layout = Layout.line(11)
    plans = sample_plans(MaskConfig(mask_ratio=0.5, block_size=2), layout, 3, 1, seed=1, step=0)[0]
    packed = pack_plans(plans)
    assert packed.shape == (3, 2)
    assert unpack_plans(packed, layout) == plans

    index = kept_index_matrix(plans)
    assert index.shape == (3, 5)
    assert np.all(np.diff(index, axis=1) > 0)

    uneven = [MaskPlan.full(layout), plans[0]]
    with pytest.raises(ShapeError):
        kept_index_matrix(uneven)


def test_plan_is_read_only_copy():
    source = np.ones(4, dtype=bool)
    plan = MaskPlan(Layout.line(4), source)
    source[0] = False
    assert plan.kept[0]
    with pytest.raises(ValueError):
        plan.kept[1] = False


def test_bad_layouts_and_blocks():
    with pytest.raises(ValidationError):
        Layout(shape=(2, 2, 2))
    with pytest.raises(ShapeError):
        MaskPlan(Layout.line(4), np.ones(5, dtype=bool))
    with pytest.raises(ConfigError):
        sample_blocks(MaskConfig(block_size=25), Layout.grid(4, 4), np.random.default_rng(0))
    with pytest.raises(ValidationError):
        MaskConfig(mask_ratio=1.5)


def test_adjust_outside_range_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="ctxlearn.masking"):
        MaskConfig(adjust=0.3)
    assert "outside" in caplog.text
