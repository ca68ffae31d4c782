"""Ablation recipes: grids of pretraining runs compared by eval loss and probe accuracy."""

import csv
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel

from ctxlearn.db import record_run
from ctxlearn.db.models import RunKind
from ctxlearn.exceptions import ConfigError
from ctxlearn.harness.pretrain import pretrain
from ctxlearn.harness.probe import probe_encoder
from ctxlearn.harness.run_config import RunConfig, with_overrides
from ctxlearn.network.model import Modality

logger = logging.getLogger(__name__)

RECIPES = ("multimask", "masking", "losses", "alibi")

MULTIMASK_MASKS = (1, 2, 4, 8, 16)
MULTIMASK_BATCHES = (8, 16, 32, 64)
MASKING_BLOCK_SIZES = (1, 3, 5)

TABLE_COLUMNS = ("recipe", "cell", "seed", "final_eval_loss", "probe_accuracy")

Cell = Tuple[str, Dict[str, Any]]


class AblationRow(BaseModel):
    recipe: str
    cell: str
    seed: int
    final_eval_loss: float
    probe_accuracy: Optional[float] = None


def recipe_cells(recipe: str, run: RunConfig) -> List[Cell]:
    """(label, config overrides) for every cell of ``recipe``."""
    if recipe == "multimask":
        # Same number of updates in every cell, so the teacher-forward budget is fixed
        return [
            (f"M={m},bsz={bsz}", {"train": {"num_masks": m, "batch_size": bsz}})
            for m in MULTIMASK_MASKS for bsz in MULTIMASK_BATCHES
        ]
    if recipe == "masking":
        cells = [
            (f"inverse_block B={b}", {"train": {"mask": {"strategy": "inverse_block", "block_size": b}}})
            for b in MASKING_BLOCK_SIZES
        ]
        cells.append(("block", {"train": {"mask": {"strategy": "block"}}}))
        cells.append(("random", {"train": {"mask": {"strategy": "random"}}}))
        return cells
    if recipe == "losses":
        if run.modality != Modality.IMAGE:
            raise ConfigError("the losses recipe compares CLS and pixel objectives, which are image-only")
        return [
            ("ctx", {"train": {"loss": "ctx"}}),
            ("ctx+cls", {"train": {"loss": "ctx+cls"}, "features": {"cls_token": True}}),
            ("ctx+pixel", {"train": {"loss": "ctx+pixel"}}),
            ("pixel_only", {"train": {"loss": "pixel_only"}}),
        ]
    if recipe == "alibi":
        return [
            ("alibi off", {"backbone": {"alibi": False}}),
            ("alibi learned scalars", {"backbone": {"alibi": True, "alibi_learn_scalars": True}}),
            ("alibi frozen scalars", {"backbone": {"alibi": True, "alibi_learn_scalars": False}}),
        ]
    raise ConfigError(f"unknown ablation recipe {recipe!r}; choose one of: {', '.join(RECIPES)}")


def run_cell(recipe: str, label: str, run: RunConfig, out_dir: Path, strict: bool) -> AblationRow:
    result = pretrain(run, out=out_dir, strict=strict, record=False)
    accuracy = None
    if result.dataset.labels is not None:
        trainer = result.trainer
        accuracy = probe_encoder(trainer.encoder, trainer.student, result.dataset, run.seed, run.probe).accuracy
    row = AblationRow(recipe=recipe, cell=label, seed=run.seed, final_eval_loss=result.eval_loss,
                      probe_accuracy=accuracy)
    record_run(
        RunKind.ABLATION,
        recipe=recipe,
        cell=label,
        modality=run.modality.value,
        seed=run.seed,
        num_masks=run.train.num_masks,
        batch_size=run.train.batch_size,
        updates=run.train.updates,
        final_eval_loss=None if math.isnan(result.eval_loss) else result.eval_loss,
        probe_accuracy=accuracy,
        checkpoint_path=str(result.checkpoint),
    )
    return row


def run_ablation(recipe: str, run: RunConfig, seeds: Sequence[int], out_dir: Path,
                 strict: bool = False) -> List[AblationRow]:
    """
    Run every cell of ``recipe`` for every seed and write ``ablation_<recipe>.csv``.

    Returns:
        One AblationRow per (cell, seed)
    """
    cells = recipe_cells(recipe, run)
    out_dir = Path(out_dir)
    rows: List[AblationRow] = []
    for label, overrides in cells:
        for seed in seeds:
            cell_run = with_overrides(run, {**overrides, "seed": seed})
            slug = label.replace(" ", "_").replace("=", "").replace(",", "_")
            logger.info(f"Ablation {recipe}: cell {label!r}, seed {seed}")
            rows.append(run_cell(recipe, label, cell_run, out_dir / recipe / f"{slug}-seed{seed}", strict))

    table = out_dir / f"ablation_{recipe}.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    with table.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for row in rows:
            writer.writerow([getattr(row, column) for column in TABLE_COLUMNS])
    for row in rows:
        accuracy = "n/a" if row.probe_accuracy is None else f"{row.probe_accuracy:.4f}"
        logger.info(f"{row.cell:<24} seed={row.seed} eval_loss={row.final_eval_loss:.5f} probe={accuracy}")
    return rows


def summarize(rows: Sequence[AblationRow]) -> Dict[str, Dict[str, float]]:
    """Per-cell mean and spread of eval loss and probe accuracy over seeds."""
    by_cell: Dict[str, List[AblationRow]] = {}
    for row in rows:
        by_cell.setdefault(row.cell, []).append(row)
    summary = {}
    for cell, group in by_cell.items():
        losses = [r.final_eval_loss for r in group]
        accuracies = [r.probe_accuracy for r in group if r.probe_accuracy is not None]
        entry = {"seeds": len(group), "eval_loss_mean": sum(losses) / len(losses)}
        if accuracies:
            mean = sum(accuracies) / len(accuracies)
            entry["accuracy_mean"] = mean
            entry["accuracy_std"] = math.sqrt(sum((a - mean) ** 2 for a in accuracies) / len(accuracies))
        summary[cell] = entry
    return summary
