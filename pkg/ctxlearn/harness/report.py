"""Plots and summaries derived only from a metrics CSV."""

import csv
import logging
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ctxlearn.exceptions import DataError, DataFormatError  # noqa: E402
from ctxlearn.training.trainer import CSV_COLUMNS  # noqa: E402

logger = logging.getLogger(__name__)


def read_metrics(path: Path) -> Dict[str, np.ndarray]:
    """Columns of a metrics CSV as float arrays; the header must match the fixed column order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metrics file {path} does not exist")
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise DataFormatError(f"{path}: unexpected header {header}", offset=0)
        rows = [row for row in reader if row]
    columns: Dict[str, List[float]] = {c: [] for c in CSV_COLUMNS}
    for number, row in enumerate(rows, start=2):
        if len(row) != len(CSV_COLUMNS):
            raise DataError(f"{path}: line {number} has {len(row)} fields, expected {len(CSV_COLUMNS)}")
        for column, value in zip(CSV_COLUMNS, row):
            columns[column].append(float(value))
    return {c: np.asarray(v) for c, v in columns.items()}


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    if len(values) == 0 or window <= 1:
        return values
    window = min(window, len(values))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def summarize(metrics: Dict[str, np.ndarray], window: int = 200) -> Dict[str, float]:
    steps = len(metrics["step"])
    if steps == 0:
        return {"steps": 0}
    smoothed = smooth(metrics["loss"], window)
    summary = {
        "steps": steps,
        "first_loss": float(metrics["loss"][0]),
        "last_loss": float(metrics["loss"][-1]),
        "smoothed_first": float(smoothed[0]),
        "smoothed_last": float(smoothed[-1]),
        "teacher_forwards": float(metrics["teacher_forwards"].mean()),
        "feature_forwards": float(metrics["feature_forwards"].mean()),
        "student_forwards": float(metrics["student_forwards"].mean()),
    }
    teacher_attn = metrics["teacher_attn_flops"].sum()
    if teacher_attn:
        masks = max(summary["student_forwards"], 1.0)
        summary["student_attn_ratio"] = float(metrics["student_attn_flops"].sum() / masks / teacher_attn)
    return summary


def plot_metrics(csv_path: Path, out_dir: Path) -> List[Path]:
    """Write loss, schedule and FLOP plots next to each other; returns the image paths."""
    metrics = read_metrics(csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = metrics["step"]
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    for column in ("loss", "main_loss", "cls_loss", "pixel_loss"):
        if np.any(metrics[column]):
            ax.plot(steps, metrics[column], label=column, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    written.append(_save(fig, out_dir / "loss.png"))

    fig, (ax_tau, ax_lr) = plt.subplots(1, 2, figsize=(10, 4))
    ax_tau.plot(steps, metrics["tau"])
    ax_tau.set_title("EMA tau")
    ax_lr.plot(steps, metrics["lr"])
    ax_lr.set_title("learning rate")
    for ax in (ax_tau, ax_lr):
        ax.set_xlabel("step")
        ax.grid(True, alpha=0.3)
    written.append(_save(fig, out_dir / "schedule.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    components = ("teacher_flops", "student_flops", "decoder_flops")
    totals = [metrics[c].sum() for c in components]
    ax.bar([c.replace("_flops", "") for c in components], totals)
    ax.set_ylabel("FLOPs (all steps)")
    written.append(_save(fig, out_dir / "flops.png"))
    return written


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path
