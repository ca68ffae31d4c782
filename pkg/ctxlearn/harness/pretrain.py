"""Build a trainer from a RunConfig and run pretraining end to end."""

import json
import logging
import math
from pathlib import Path
from typing import Optional, Tuple

from ctxlearn.config import settings
from ctxlearn.db import record_run
from ctxlearn.db.models import RunKind
from ctxlearn.decoder import ConvDecoder
from ctxlearn.exceptions import ConfigError
from ctxlearn.harness.checkpoint import collect_state, load_checkpoint, restore_state, save_checkpoint
from ctxlearn.harness.datasets import Dataset, ingest_dataset
from ctxlearn.harness.run_config import RunConfig, validate_run_config, with_overrides
from ctxlearn.network.model import Encoder, Modality
from ctxlearn.training.trainer import Trainer

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
FINAL_CHECKPOINT = "final.ckpt"


class PretrainResult:
    def __init__(self, run: RunConfig, out_dir: Path, checkpoint: Path, metrics: Path,
                 eval_loss: float, steps: int, trainer, dataset: Dataset):
        self.run = run
        self.out_dir = out_dir
        self.checkpoint = checkpoint
        self.metrics = metrics
        self.eval_loss = eval_loss
        self.steps = steps
        self.trainer = trainer
        self.dataset = dataset


def resolve_for_dataset(run: RunConfig, dataset: Dataset) -> RunConfig:
    """Fill settings that depend on the data (text vocabulary size)."""
    if run.modality == Modality.TEXT:
        vocab_size = len(dataset.vocab)
        if run.features.vocab_size == 0:
            return with_overrides(run, {"features": {"vocab_size": vocab_size}})
        if run.features.vocab_size < vocab_size:
            raise ConfigError(f"features.vocab_size={run.features.vocab_size} is smaller than the vocabulary ({vocab_size})")
    return run


def build_model(run: RunConfig) -> Tuple[Encoder, ConvDecoder]:
    encoder = Encoder(run.modality, run.features, run.backbone)
    pixel_width = 0
    if run.train.loss.uses_pixels:
        pixel_width = run.features.channels * run.features.patch ** 2
    decoder = ConvDecoder(
        run.decoder,
        encoder_width=encoder.width,
        target_width=encoder.width,
        dims=2 if run.modality == Modality.IMAGE else 1,
        pixel_width=pixel_width,
        predict_targets=run.train.loss.uses_targets,
    )
    return encoder, decoder


def build_trainer(run: RunConfig, strict: bool = False) -> Trainer:
    encoder, decoder = build_model(run)
    return Trainer.build(encoder, decoder, run.train, seed=run.seed, strict=strict)


def output_dir_for(run: RunConfig, out: Optional[Path] = None) -> Path:
    if out is not None:
        return Path(out)
    if run.output_dir is not None:
        return Path(run.output_dir)
    return settings.output_root / f"{run.modality.value}-seed{run.seed}"


def checkpoint_config(run: RunConfig, trainer) -> dict:
    layout = None
    if trainer.last_plans:
        layout = list(trainer.last_plans[0][0].layout.shape)
    return {"run": run.model_dump(mode="json"), "mask_layout": layout}


def run_from_checkpoint(checkpoint) -> RunConfig:
    data = checkpoint.config.get("run") if checkpoint.config else None
    if not data:
        raise ConfigError("checkpoint carries no run configuration")
    return validate_run_config(data)


def pretrain(run: RunConfig, out: Optional[Path] = None, resume: Optional[Path] = None,
             strict: bool = False, record: bool = True) -> PretrainResult:
    """
    Pretrain for ``run.train.updates`` updates.

    Args:
        run: Validated run configuration
        out: Output directory; falls back to ``run.output_dir`` then the settings root
        resume: Checkpoint to continue from; the run config must describe the same model
        strict: Serialize everything and write wall_clock as 0.0
        record: Append a row to the results ledger

    Returns:
        PretrainResult with paths, final eval loss and the trained trainer
    """
    strict = strict or settings.strict
    dataset = ingest_dataset(run.dataset, run.modality, run.seed, run.features)
    run = resolve_for_dataset(run, dataset)
    train_set, held_out = dataset.split(run.dataset.eval_fraction, run.seed)
    if len(train_set) == 0:
        raise ConfigError("no training samples left after the held-out split")

    out_dir = output_dir_for(run, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_FILE).write_text(json.dumps(run.model_dump(mode="json"), indent=2, sort_keys=True))

    trainer = build_trainer(run, strict)
    start = 0
    if resume is not None:
        start = restore_state(trainer, load_checkpoint(resume))
        if start >= run.train.updates:
            logger.warning(f"Checkpoint is at step {start}; nothing left of {run.train.updates} updates")

    def on_checkpoint(step: int) -> None:
        save_checkpoint(out_dir / f"step{step:06d}.ckpt", collect_state(trainer, step, checkpoint_config(run, trainer)))

    metrics_path = out_dir / METRICS_FILE
    history = trainer.fit(train_set.inputs, metrics_path, start, on_checkpoint)
    final = save_checkpoint(
        out_dir / FINAL_CHECKPOINT,
        collect_state(trainer, run.train.updates, checkpoint_config(run, trainer)),
    )

    eval_loss = trainer.evaluate(held_out.inputs) if len(held_out) else math.nan
    logger.info(f"Finished {len(history)} updates; held-out loss {eval_loss:.5f}")
    if record:
        record_run(
            RunKind.PRETRAIN,
            modality=run.modality.value,
            seed=run.seed,
            num_masks=run.train.num_masks,
            batch_size=run.train.batch_size,
            updates=run.train.updates,
            final_eval_loss=None if math.isnan(eval_loss) else eval_loss,
            checkpoint_path=str(final),
        )
    return PretrainResult(run, out_dir, final, metrics_path, eval_loss, len(history), trainer, dataset)
