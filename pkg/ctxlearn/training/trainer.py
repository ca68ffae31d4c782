"""Multi-mask training step, evaluation and the pretraining loop."""

import csv
import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from ctxlearn.core.tensor import Tensor, no_grad
from ctxlearn.decoder import ConvDecoder, merge_mask_tokens, noise_rng
from ctxlearn.exceptions import ConfigError, NumericFaultError
from ctxlearn.masking import MaskConfig, MaskPlan, plan_rng, sample_plans
from ctxlearn.network.model import Encoder, Modality
from ctxlearn.network.params import ModelParams
from ctxlearn.teacher import (
    TargetBatch, TauSchedule, TeacherState, assert_no_teacher_grad, build_targets,
    default_post_ln, default_top_k, ema_update, tau_at,
)
from ctxlearn.training.flops import FlopMeter
from ctxlearn.training.losses import cls_loss, l2_masked_loss, pixel_regression_loss
from ctxlearn.training.optim import AdamW, OptimConfig, lr_at

logger = logging.getLogger(__name__)

# Stream slots in plan_rng reserved for things that are not mask plans
AUGMENT_STREAM = 2 ** 32 - 1
BATCH_STREAM = 2 ** 32 - 2
EVAL_STEP = 2 ** 32 - 3

CSV_COLUMNS = (
    "step", "loss", "main_loss", "cls_loss", "pixel_loss", "tau", "lr",
    "teacher_forwards", "feature_forwards", "student_forwards",
    "teacher_flops", "student_flops", "decoder_flops",
    "teacher_attn_flops", "student_attn_flops", "wall_clock",
)


class LossVariant(str, enum.Enum):
    """Training objective."""
    CTX = "ctx"
    CTX_CLS = "ctx+cls"
    CTX_PIXEL = "ctx+pixel"
    PIXEL_ONLY = "pixel_only"

    @property
    def uses_targets(self) -> bool:
        return self != LossVariant.PIXEL_ONLY

    @property
    def uses_cls(self) -> bool:
        return self == LossVariant.CTX_CLS

    @property
    def uses_pixels(self) -> bool:
        return self in (LossVariant.CTX_PIXEL, LossVariant.PIXEL_ONLY)


class TrainConfig(BaseModel):
    """Everything a pretraining run needs beyond the architecture."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_masks: int = Field(8, ge=1)                 # M
    mask: MaskConfig = MaskConfig()
    loss: LossVariant = LossVariant.CTX
    cls_weight: float = Field(1.0, ge=0.0)          # lambda
    pixel_weight: float = Field(1.0, ge=0.0)
    top_k: Optional[int] = Field(None, ge=1)        # K; ceil(depth / 2) when unset
    post_ln: Optional[bool] = None                  # modality default when unset
    tau: TauSchedule = TauSchedule()
    optim: OptimConfig = OptimConfig()
    updates: int = Field(1000, ge=1)
    batch_size: int = Field(16, ge=1)
    augment: bool = True
    crop_padding: int = Field(4, ge=0)
    eval_batches: int = Field(4, ge=1)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(0, ge=0)


class StepMetrics(BaseModel):
    """One CSV row. Forward counts are passes over the batch, so per-sample counts are the same."""

    step: int
    loss: float
    main_loss: float = 0.0
    cls_loss: float = 0.0
    pixel_loss: float = 0.0
    tau: float = 0.0
    lr: float = 0.0
    teacher_forwards: int = 0
    feature_forwards: int = 0
    student_forwards: int = 0
    teacher_flops: int = 0
    student_flops: int = 0
    decoder_flops: int = 0
    teacher_attn_flops: int = 0
    student_attn_flops: int = 0
    wall_clock: float = 0.0

    def as_row(self) -> List[str]:
        values = self.model_dump()
        return [repr(values[c]) if isinstance(values[c], float) else str(values[c]) for c in CSV_COLUMNS]


def augment_images(images: np.ndarray, seed: int, step: int, padding: int) -> np.ndarray:
    """Reflect-pad, random crop back to size and random horizontal flip, once per sample."""
    batch, _, height, width = images.shape
    padded = np.pad(images, [(0, 0), (0, 0), (padding, padding), (padding, padding)], mode="reflect")
    out = np.empty_like(images)
    for b in range(batch):
        rng = plan_rng(seed, step, b, AUGMENT_STREAM)
        top, left = rng.integers(0, 2 * padding + 1, size=2)
        view = padded[b, :, top:top + height, left:left + width]
        out[b] = view[:, :, ::-1] if rng.random() < 0.5 else view
    return out


def batch_indices(count: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices of a step's batch, derived only from (seed, step)."""
    rng = plan_rng(seed, step, BATCH_STREAM, 0)
    return np.sort(rng.choice(count, size=min(batch_size, count), replace=False))


class StepCounters:
    def __init__(self):
        self.teacher_forwards = 0
        self.feature_forwards = 0
        self.student_forwards = 0


class LossTerms:
    def __init__(self, total: Tensor, main: float, cls: float, pixel: float,
                 plans: List[List[MaskPlan]]):
        self.total = total
        self.main = main
        self.cls = cls
        self.pixel = pixel
        self.plans = plans


class Trainer:
    """
    Student, EMA teacher, decoder and optimizer for one modality.

    ``train_step`` builds teacher targets once, runs the student feature
    encoder once and shares both across ``num_masks`` masked versions.
    """

    def __init__(self, encoder: Encoder, decoder: ConvDecoder, config: TrainConfig,
                 student: ModelParams, teacher: TeacherState, seed: int = 0, strict: bool = False):
        if config.loss.uses_cls and not encoder.has_cls:
            raise ConfigError("the ctx+cls loss needs features.cls_token (images only)")
        if config.loss.uses_pixels and encoder.modality != Modality.IMAGE:
            raise ConfigError(f"pixel regression is only defined for images, not {encoder.modality.value}")
        self.encoder = encoder
        self.decoder = decoder
        self.config = config
        self.student = student
        self.teacher = teacher
        self.seed = seed
        self.strict = strict
        self.optimizer = AdamW(student, config.optim)
        self.top_k = config.top_k or default_top_k(encoder.depth)
        self.post_ln = default_post_ln(encoder.modality.value) if config.post_ln is None else config.post_ln
        self.last_plans: List[List[MaskPlan]] = []

    @classmethod
    def build(cls, encoder: Encoder, decoder: ConvDecoder, config: TrainConfig,
              seed: int = 0, strict: bool = False) -> "Trainer":
        rng = np.random.default_rng(seed)
        student = ModelParams()
        encoder.init_params(student, rng)
        decoder.init_params(student, rng)
        teacher = TeacherState.from_student(student)
        logger.info(f"Built {encoder.modality.value} model with {student.count():,} trainable parameters")
        return cls(encoder, decoder, config, student, teacher, seed, strict)

    # ---- one step ----

    def prepare(self, inputs: np.ndarray, step: int) -> np.ndarray:
        if self.encoder.modality == Modality.IMAGE and self.config.augment and self.config.crop_padding:
            return augment_images(inputs, self.seed, step, self.config.crop_padding)
        return inputs

    def loss_terms(self, inputs: np.ndarray, step: int, meter: Optional[FlopMeter] = None,
                   counters: Optional[StepCounters] = None) -> LossTerms:
        """Compute the averaged multi-mask loss for one (already augmented) batch."""
        config = self.config
        counters = counters or StepCounters()
        targets: Optional[TargetBatch] = None
        if config.loss.uses_targets:
            targets = build_targets(inputs, self.teacher, self.encoder, self.top_k, self.post_ln, meter)
            counters.teacher_forwards += 1

        features = self.encoder.features(self.student, inputs)
        counters.feature_forwards += 1

        plans = sample_plans(config.mask, features.layout, features.batch_size, config.num_masks, self.seed, step)
        total = None
        main = cls = pixel = 0.0
        for m, mask_plans in enumerate(plans):
            trace = self.encoder.encode_masked(self.student, features, mask_plans, meter, "student")
            counters.student_forwards += 1
            merged = merge_mask_tokens(trace.output, mask_plans, self.decoder.config.noise_std,
                                       noise_rng(self.seed, step, m))
            out = self.decoder(self.student, merged, meter)

            term = None
            if targets is not None:
                term = l2_masked_loss(out.prediction, targets, mask_plans)
                main += term.item()
            if config.loss.uses_cls:
                c = cls_loss(trace.cls, targets)
                cls += c.item()
                term = term + c * config.cls_weight
            if config.loss.uses_pixels:
                p = pixel_regression_loss(out.pixels, inputs, mask_plans, self.encoder.feature_config.patch)
                pixel += p.item()
                weighted = p * config.pixel_weight
                term = weighted if term is None else term + weighted
            total = term if total is None else total + term

        scale = 1.0 / config.num_masks
        return LossTerms(total * scale, main * scale, cls * scale, pixel * scale, plans)

    def train_step(self, batch: np.ndarray, step: int) -> StepMetrics:
        """
        One optimizer update on ``batch``.

        Args:
            batch: Raw inputs for this step (images, waveforms or token ids)
            step: Global update index; seeds masks, noise and augmentation

        Returns:
            StepMetrics for the CSV
        """
        started = time.perf_counter()
        config = self.config
        inputs = self.prepare(batch, step)
        meter = FlopMeter()
        counters = StepCounters()

        terms = self.loss_terms(inputs, step, meter, counters)
        loss = terms.total.item()
        if not np.isfinite(loss):
            raise NumericFaultError(
                f"loss at step {step}",
                f"main={terms.main!r} cls={terms.cls!r} pixel={terms.pixel!r}",
            )

        self.student.zero_grad()
        terms.total.backward()
        lr = lr_at(config.optim, step, config.updates)
        self.optimizer.step(lr)

        tau = tau_at(config.tau, step)
        ema_update(self.teacher, self.student, tau)
        assert_no_teacher_grad(self.teacher)
        self.last_plans = terms.plans

        return StepMetrics(
            step=step,
            loss=loss,
            main_loss=terms.main,
            cls_loss=terms.cls,
            pixel_loss=terms.pixel,
            tau=tau,
            lr=lr,
            teacher_forwards=counters.teacher_forwards,
            feature_forwards=counters.feature_forwards,
            student_forwards=counters.student_forwards,
            teacher_flops=meter.total("teacher"),
            student_flops=meter.total("student"),
            decoder_flops=meter.total("decoder"),
            teacher_attn_flops=meter.get("teacher", "attn_scores"),
            student_attn_flops=meter.get("student", "attn_scores"),
            wall_clock=0.0 if self.strict else time.perf_counter() - started,
        )

    def evaluate(self, inputs: np.ndarray) -> float:
        """Main loss on held-out samples, without augmentation or updates."""
        if len(inputs) == 0:
            raise ConfigError("evaluation needs at least one sample")
        losses = []
        size = self.config.batch_size
        with no_grad():
            for i, start in enumerate(range(0, min(len(inputs), size * self.config.eval_batches), size)):
                terms = self.loss_terms(inputs[start:start + size], EVAL_STEP - i)
                losses.append(terms.total.item())
        return float(np.mean(losses))

    # ---- loop ----

    def batches(self, dataset: np.ndarray, start: int, stop: int) -> Iterator[Tuple[int, np.ndarray]]:
        """Yield (step, batch); one batch is prepared ahead on a worker thread unless strict."""
        def fetch(step: int) -> np.ndarray:
            return dataset[batch_indices(len(dataset), self.config.batch_size, self.seed, step)]

        if self.strict:
            for step in range(start, stop):
                yield step, fetch(step)
            return
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = pool.submit(fetch, start) if start < stop else None
            for step in range(start, stop):
                batch = pending.result()
                pending = pool.submit(fetch, step + 1) if step + 1 < stop else None
                yield step, batch

    def fit(
        self,
        dataset: np.ndarray,
        csv_path: Path,
        start_step: int = 0,
        on_checkpoint: Optional[Callable[[int], None]] = None,
    ) -> List[StepMetrics]:
        """
        Run updates ``start_step .. updates - 1``, writing one CSV row per step.

        On resume, rows already in ``csv_path`` for steps before ``start_step`` are kept
        and later ones dropped, so steps stay strictly increasing.
        ``on_checkpoint(next_step)`` is called every ``checkpoint_every`` updates.
        """
        config = self.config
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        earlier = rows_before(csv_path, start_step)
        history: List[StepMetrics] = []

        with csv_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            writer.writerows(earlier)
            progress = tqdm(
                self.batches(dataset, start_step, config.updates),
                total=config.updates - start_step,
                desc="pretrain",
                disable=self.strict or None,
            )
            for step, batch in progress:
                metrics = self.train_step(batch, step)
                writer.writerow(metrics.as_row())
                history.append(metrics)
                if step % config.log_every == 0 or step == config.updates - 1:
                    logger.info(
                        f"step {step}: loss={metrics.loss:.5f} main={metrics.main_loss:.5f} "
                        f"tau={metrics.tau:.5f} lr={metrics.lr:.2e}"
                    )
                if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 and on_checkpoint:
                    handle.flush()
                    on_checkpoint(step + 1)
        return history


def rows_before(csv_path: Path, step: int) -> List[List[str]]:
    """Metric rows of an existing CSV with step < ``step``; nothing for a fresh run or a foreign file."""
    if step == 0 or not csv_path.exists():
        return []
    with csv_path.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        logger.warning(f"{csv_path} does not have the metrics header; starting it over")
        return []
    return [row for row in rows[1:] if row and int(row[0]) < step]


def forward_ratio(history: Sequence[StepMetrics]) -> Dict[str, float]:
    """Average forwards per step; a healthy run shows 1 : 1 : num_masks."""
    if not history:
        return {"teacher": 0.0, "feature": 0.0, "student": 0.0}
    n = len(history)
    return {
        "teacher": sum(m.teacher_forwards for m in history) / n,
        "feature": sum(m.feature_forwards for m in history) / n,
        "student": sum(m.student_forwards for m in history) / n,
    }
