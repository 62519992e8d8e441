"""Detector output normalization: clamping, score filtering, and greedy NMS.

The attack treats the detector as a black box, so the only processing applied
to its raw output is the harvest pipeline here.  All operations are
class-agnostic: class ids ride along untouched and never affect suppression.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .core import BBox, DetectionSet, ScoredBox

__all__ = ["PostprocessConfig", "iou", "score_filter", "nms", "clamp_boxes", "harvest"]


@dataclass(frozen=True)
class PostprocessConfig:
    """Harvest thresholds.

    ``score_threshold`` keeps boxes scoring at or above it; ``nms_threshold``
    suppresses overlaps with IoU strictly above it, so 1.0 disables
    suppression entirely.  The detector-internal metadata fields record what
    the source detector used for its own region proposals and head; they are
    bookkeeping only and are never applied here.
    """

    score_threshold: float = 0.01
    nms_threshold: float = 1.0
    rpn_nms_threshold: float | None = 0.7
    head_nms_threshold: float | None = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must lie in [0, 1], got {self.score_threshold}")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ValueError(f"nms_threshold must lie in [0, 1], got {self.nms_threshold}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 whenever either box has zero area."""
    area_a = a.area
    area_b = b.area
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    iw = ix1 - ix0
    ih = iy1 - iy0
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def _score_order(boxes: Sequence[ScoredBox]) -> list[int]:
    # Descending score; equal scores keep input order (stable sort on -score).
    return sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))


def score_filter(boxes: Sequence[ScoredBox], threshold: float) -> list[ScoredBox]:
    """Keep boxes with score >= threshold (boundary scores survive)."""
    return [sb for sb in boxes if sb.score >= threshold]


def nms(boxes: Sequence[ScoredBox], threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression, highest score first.

    A kept box suppresses later boxes whose IoU with it is strictly greater
    than ``threshold``; at threshold 1.0 nothing can be suppressed (IoU never
    exceeds 1) and the result is the input sorted by descending score.  Score
    ties are broken toward the earlier input index.
    """
    order = _score_order(boxes)
    kept: list[ScoredBox] = []
    for i in order:
        candidate = boxes[i]
        if all(iou(candidate.box, k.box) <= threshold for k in kept):
            kept.append(candidate)
    return kept


def clamp_boxes(detections: DetectionSet) -> DetectionSet:
    """Clamp every corner into [0, width] x [0, height]."""
    w, h = detections.width, detections.height
    clamped = tuple(
        replace(
            sb,
            box=BBox(
                min(max(sb.box.x0, 0.0), w),
                min(max(sb.box.y0, 0.0), h),
                min(max(sb.box.x1, 0.0), w),
                min(max(sb.box.y1, 0.0), h),
            ),
        )
        for sb in detections.boxes
    )
    return replace(detections, boxes=clamped)


def harvest(detections: DetectionSet, cfg: PostprocessConfig) -> DetectionSet:
    """Clamp to image bounds, drop low scores, then suppress overlaps.

    The output records the thresholds used under ``meta["postprocess"]`` and
    its boxes are sorted by descending score (NMS emission order).
    """
    clamped = clamp_boxes(detections)
    filtered = score_filter(clamped.boxes, cfg.score_threshold)
    kept = nms(filtered, cfg.nms_threshold)
    meta = dict(detections.meta)
    meta["postprocess"] = {
        "score_threshold": cfg.score_threshold,
        "nms_threshold": cfg.nms_threshold,
    }
    return replace(clamped, boxes=tuple(kept), meta=meta)
