"""Measured and closed-form FLOP accounting per component (teacher, student, decoder)."""

from collections import defaultdict
from typing import Dict, Optional

from ctxlearn.masking import target_kept


class FlopMeter:
    """Accumulates FLOPs reported by forward passes as ``add(component, kind, flops)``."""

    def __init__(self):
        self._counts: Dict[str, Dict[str, int]] = defaultdict(lambda: defaultdict(int))

    def add(self, component: str, kind: str, flops: int) -> None:
        self._counts[component][kind] += int(flops)

    def get(self, component: str, kind: str) -> int:
        return self._counts.get(component, {}).get(kind, 0)

    def total(self, component: str) -> int:
        return sum(self._counts.get(component, {}).values())


def backbone_flops(tokens: int, depth: int, width: int, ffn_mult: int, batch: int = 1) -> Dict[str, int]:
    """Per-kind FLOPs of one backbone pass over ``tokens`` positions, matching what the backbone meters."""
    per_block = {
        "attn_scores": 2 * batch * tokens * tokens * width,
        "attn_values": 2 * batch * tokens * tokens * width,
        "projections": 2 * batch * tokens * width * 4 * width,
        "ffn": 2 * batch * tokens * width * width * ffn_mult * 2,
    }
    return {kind: flops * depth for kind, flops in per_block.items()}


def flop_report(
    length: int,
    mask_ratio: float,
    num_masks: int,
    depth: int,
    width: int,
    ffn_mult: int = 4,
    decoder_depth: int = 0,
    decoder_width: int = 0,
    decoder_kernel_taps: int = 1,
    decoder_groups: int = 1,
    prefix_tokens: int = 0,
    batch: int = 1,
) -> Dict[str, object]:
    """
    Closed-form per-step FLOP estimates.

    Args:
        length: Positions L in the full layout
        mask_ratio: R; the student sees floor(L * (1 - R)) positions
        num_masks: M masked versions per sample
        depth, width, ffn_mult: Backbone shape
        decoder_depth, decoder_width, decoder_kernel_taps, decoder_groups: Decoder shape;
            taps is kernel**2 for image grids
        prefix_tokens: CLS tokens added to both teacher and student passes
        batch: Samples per step

    Returns:
        Dict with per-component totals, the per-kind breakdowns and
        ``teacher_share``, the teacher's fraction of all FLOPs in the step

    ``student_attn_ratio`` is (kept / L)², which equals (1 - R)² only when L * (1 - R)
    is an integer: L=100 at R=0.8 gives 0.04, L=64 gives (12/64)² ≈ 0.0352.
    """
    kept = target_kept(length, mask_ratio)
    teacher = backbone_flops(length + prefix_tokens, depth, width, ffn_mult, batch)
    student_once = backbone_flops(kept + prefix_tokens, depth, width, ffn_mult, batch)
    student = {kind: flops * num_masks for kind, flops in student_once.items()}
    decoder = 0
    if decoder_depth:
        per_group = decoder_width // decoder_groups
        decoder = 2 * batch * length * decoder_width * per_group * decoder_kernel_taps * decoder_depth * num_masks

    teacher_total = sum(teacher.values())
    student_total = sum(student.values())
    everything = teacher_total + student_total + decoder
    return {
        "kept": kept,
        "teacher": teacher_total,
        "student": student_total,
        "decoder": decoder,
        "teacher_kinds": teacher,
        "student_kinds": student,
        "student_attn_ratio": student_once["attn_scores"] / teacher["attn_scores"] if teacher["attn_scores"] else 0.0,
        "teacher_share": teacher_total / everything if everything else 0.0,
    }


def attention_ratio(meter: FlopMeter, num_masks: Optional[int] = 1) -> float:
    """Measured student/teacher attention-score FLOPs, per masked version."""
    teacher = meter.get("teacher", "attn_scores")
    if not teacher:
        return 0.0
    return meter.get("student", "attn_scores") / (num_masks or 1) / teacher
