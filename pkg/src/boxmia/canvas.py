"""Rasterization of detection sets onto fixed-size intensity canvases.

A canvas is a square float image, initially zero, onto which each detection
box deposits its (optionally rescaled) confidence.  The canvas is what the
attack classifier actually sees: it encodes box geometry and score structure
while being independent of the source image content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .core import DetectionSet

__all__ = [
    "BoxMode",
    "Accumulation",
    "Transform",
    "CanvasConfig",
    "Canvas",
    "RESCALE_CAP",
    "rescale_score",
    "render",
    "augment",
]


class BoxMode(Enum):
    """How a detection box maps to canvas geometry.

    ORIGINAL keeps the box's own rectangle (scaled to canvas units); UNIFORM
    replaces it with a fixed-size square at the box center, discarding size
    and aspect so that only position and score survive.
    """

    ORIGINAL = "original"
    UNIFORM = "uniform"


class Accumulation(Enum):
    """Combining rule where boxes overlap: brightest wins, or intensities add."""

    MAX = "max"
    SUM = "sum"


class Transform(Enum):
    """Axis-aligned symmetries of the square canvas used for augmentation."""

    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"


@dataclass(frozen=True)
class CanvasConfig:
    size: int = 300
    box_mode: BoxMode = BoxMode.UNIFORM
    uniform_fraction: float = 0.1
    rescale_scores: bool = True
    accumulation: Accumulation = Accumulation.MAX

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError(f"canvas size must be >= 1, got {self.size}")
        if not 0.0 < self.uniform_fraction <= 1.0:
            raise ValueError(
                f"uniform_fraction must lie in (0, 1], got {self.uniform_fraction}"
            )
        if self.uniform_fraction * self.size < 1.0:
            raise ValueError(
                "uniform square must cover at least one pixel: "
                f"fraction {self.uniform_fraction} * size {self.size} < 1"
            )


@dataclass(eq=False)
class Canvas:
    """Square intensity grid, indexed ``pixels[y, x]`` with row 0 at the top."""

    size: int
    pixels: np.ndarray
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.size, self.size):
            raise ValueError(
                f"pixel grid shape {self.pixels.shape} does not match size {self.size}"
            )


# Saturation value for a confidence of exactly 1: the rescale of the largest
# double below 1, whose distance from 1 is 2**-53.
RESCALE_CAP = 53.0 * math.log(2.0)


def rescale_score(score: float) -> float:
    """Map confidence s to -log(1 - s), emphasizing near-certain detections.

    Monotone on [0, 1] with rescale(0) = 0; an input of exactly 1 saturates at
    RESCALE_CAP (about 36.74) instead of diverging.  Inputs outside [0, 1]
    raise ValueError.
    """
    if not (0.0 <= score <= 1.0):
        raise ValueError(f"score must lie in [0, 1], got {score!r}")
    if score == 1.0:
        return RESCALE_CAP
    return -math.log1p(-score)


def _pixel_span(lo: float, hi: float, size: int) -> tuple[int, int]:
    """Indices i with center i + 0.5 inside the half-open interval [lo, hi)."""
    first = max(0, math.ceil(lo - 0.5))
    last = min(size, math.ceil(hi - 0.5))
    return first, last


def render(detections: DetectionSet, cfg: CanvasConfig) -> Canvas:
    """Rasterize a detection set onto an empty canvas.

    Image coordinates scale to canvas units by size/width horizontally and
    size/height vertically.  A pixel belongs to a box iff its center lies in
    the box's half-open rectangle [x_lo, x_hi) x [y_lo, y_hi); portions
    outside the canvas are clipped.  Deposited intensity is the box score,
    passed through :func:`rescale_score` when the config asks for it.
    """
    s = cfg.size
    pixels = np.zeros((s, s), dtype=np.float64)
    sx = s / detections.width
    sy = s / detections.height
    half_side = 0.5 * cfg.uniform_fraction * s
    for sb in detections.boxes:
        b = sb.box
        if cfg.box_mode is BoxMode.UNIFORM:
            cx, cy = b.center()
            x_lo, x_hi = cx * sx - half_side, cx * sx + half_side
            y_lo, y_hi = cy * sy - half_side, cy * sy + half_side
        else:
            x_lo, x_hi = b.x0 * sx, b.x1 * sx
            y_lo, y_hi = b.y0 * sy, b.y1 * sy
        ix0, ix1 = _pixel_span(x_lo, x_hi, s)
        iy0, iy1 = _pixel_span(y_lo, y_hi, s)
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        value = rescale_score(sb.score) if cfg.rescale_scores else sb.score
        region = pixels[iy0:iy1, ix0:ix1]
        if cfg.accumulation is Accumulation.MAX:
            np.maximum(region, value, out=region)
        else:
            region += value
    meta = {"image_id": detections.image_id, "box_mode": cfg.box_mode.value}
    return Canvas(size=s, pixels=pixels, meta=meta)


def augment(canvas: Canvas, transform: Transform) -> Canvas:
    """Apply one square symmetry, returning a new canvas.

    With rows displayed top to bottom, HFLIP mirrors left/right, VFLIP
    top/bottom, and ROT90 turns the image a quarter turn counterclockwise
    (ROT180 and ROT270 iterate it).  Intensities are permuted, never changed.
    """
    p = canvas.pixels
    if transform is Transform.HFLIP:
        out = p[:, ::-1]
    elif transform is Transform.VFLIP:
        out = p[::-1, :]
    elif transform is Transform.ROT90:
        out = np.rot90(p, 1)
    elif transform is Transform.ROT180:
        out = np.rot90(p, 2)
    elif transform is Transform.ROT270:
        out = np.rot90(p, 3)
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unknown transform {transform!r}")
    meta = dict(canvas.meta)
    meta["transform"] = transform.value
    return Canvas(size=canvas.size, pixels=np.ascontiguousarray(out), meta=meta)
