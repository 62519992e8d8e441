"""Flat feature vectors for learners that consume detections directly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DetectionSet

__all__ = ["FeatureVector", "vectorize"]


@dataclass(eq=False)
class FeatureVector:
    """Fixed-length encoding of a detection set: 5 * n_max values."""

    values: np.ndarray
    n_max: int

    def __post_init__(self) -> None:
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.values.shape != (5 * self.n_max,):
            raise ValueError(
                f"expected {5 * self.n_max} values for n_max={self.n_max}, "
                f"got shape {self.values.shape}"
            )


def vectorize(detections: DetectionSet, n_max: int = 100) -> FeatureVector:
    """Encode up to n_max highest-scoring boxes as (x0, y0, x1, y1, score).

    Boxes are ordered by descending score (ties keep input order) and
    coordinates are normalized by the image size, so values lie in [0, 1]
    for clamped inputs.  Missing slots are zero-padded, which is
    indistinguishable from a zero-score degenerate box at the origin by
    design: absent and worthless detections should look alike.
    """
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    order = sorted(
        range(len(detections.boxes)), key=lambda i: (-detections.boxes[i].score, i)
    )[:n_max]
    values = np.zeros(5 * n_max, dtype=np.float64)
    w, h = detections.width, detections.height
    for slot, i in enumerate(order):
        sb = detections.boxes[i]
        values[5 * slot : 5 * slot + 5] = (
            sb.box.x0 / w,
            sb.box.y0 / h,
            sb.box.x1 / w,
            sb.box.y1 / h,
            sb.score,
        )
    return FeatureVector(values=values, n_max=n_max)
