"""Synthetic detector outputs conditioned on training membership.

Real attacks query a trained detector; desk-scale experiments use this
simulator as a declared stand-in.  The membership signal is injected
directly: proposals for member images sit tighter around their objects and
score higher than proposals for non-member images, which is exactly the
overfitting asymmetry a leaky detector exhibits.  The strength of that
asymmetry is controlled by ``overfit_level``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

from scipy.special import betaln, digamma

from .core import BBox, DetectionSet, MembershipLabel, MembershipRecord, ScoredBox, SeededRng, Source
from .postprocess import PostprocessConfig, harvest

__all__ = [
    "SimulatorConfig",
    "World",
    "leaky_preset",
    "null_preset",
    "sample_detections",
    "sample_detections_with_truth",
    "generate_world",
    "separability_proxy",
]

# Ground-truth object extent as a fraction of each image dimension.
_OBJ_MIN_FRAC = 0.1
_OBJ_MAX_FRAC = 0.5

_HARVEST = PostprocessConfig(score_threshold=0.01, nms_threshold=1.0)


@dataclass(frozen=True)
class SimulatorConfig:
    """Detector behavior per membership label.

    ``jitter_in``/``jitter_out`` are the corner-noise standard deviations in
    pixels for member and non-member images; ``score_in``/``score_out`` are
    Beta(alpha, beta) confidence distributions.  ``overfit_level`` in [0, 1]
    moves the member-side parameters from the non-member values (0, detector
    memorized nothing) to the configured member values (1, fully leaky);
    jitter interpolates geometrically, score distributions interpolate their
    Beta mean and concentration linearly.  Non-member behavior never depends
    on the level.
    """

    image_width: float = 300.0
    image_height: float = 300.0
    objects_per_image: tuple[int, int] = (1, 3)
    proposals_per_object: tuple[int, int] = (4, 10)
    jitter_in: float = 2.0
    jitter_out: float = 12.0
    score_in: tuple[float, float] = (8.0, 2.0)
    score_out: tuple[float, float] = (2.0, 2.0)
    overfit_level: float = 1.0

    def __post_init__(self) -> None:
        if not (self.image_width > 0 and self.image_height > 0):
            raise ValueError("image dimensions must be positive")
        for name in ("objects_per_image", "proposals_per_object"):
            lo, hi = getattr(self, name)
            if not (isinstance(lo, int) and isinstance(hi, int) and 0 <= lo <= hi):
                raise ValueError(f"{name} must be an integer range 0 <= lo <= hi, got ({lo}, {hi})")
        if self.jitter_in < 0 or self.jitter_out < 0:
            raise ValueError("jitter values must be >= 0")
        for name in ("score_in", "score_out"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ValueError(f"{name} must have positive Beta parameters, got ({a}, {b})")
        if not 0.0 <= self.overfit_level <= 1.0:
            raise ValueError(f"overfit_level must lie in [0, 1], got {self.overfit_level}")


def leaky_preset(**overrides) -> SimulatorConfig:
    """Stock overfit detector: tight, confident member proposals.

    Requires jitter_in <= jitter_out and a member score mean at least the
    non-member mean, so raising overfit_level can only separate the labels.
    """
    cfg = SimulatorConfig(**overrides)
    if cfg.jitter_in > cfg.jitter_out:
        raise ValueError(
            f"leaky preset needs jitter_in <= jitter_out, got {cfg.jitter_in} > {cfg.jitter_out}"
        )
    if _beta_mean(cfg.score_in) < _beta_mean(cfg.score_out):
        raise ValueError("leaky preset needs member score mean >= non-member score mean")
    return cfg


def null_preset(**overrides) -> SimulatorConfig:
    """Memorization-free detector: member and non-member outputs follow the
    identical distribution (and the identical sample path under one rng)."""
    base = SimulatorConfig(**overrides)
    return replace(base, jitter_in=base.jitter_out, score_in=base.score_out)


def _beta_mean(params: tuple[float, float]) -> float:
    a, b = params
    return a / (a + b)


def _member_params(cfg: SimulatorConfig) -> tuple[float, tuple[float, float]]:
    """Effective member-side (jitter, score Beta params) at the overfit level."""
    if cfg.jitter_in == cfg.jitter_out and cfg.score_in == cfg.score_out:
        return cfg.jitter_out, cfg.score_out
    t = cfg.overfit_level
    if t == 0.0:
        return cfg.jitter_out, cfg.score_out
    if t == 1.0:
        return cfg.jitter_in, cfg.score_in
    jitter = cfg.jitter_out ** (1.0 - t) * cfg.jitter_in**t
    m = (1.0 - t) * _beta_mean(cfg.score_out) + t * _beta_mean(cfg.score_in)
    conc = (1.0 - t) * sum(cfg.score_out) + t * sum(cfg.score_in)
    return jitter, (m * conc, (1.0 - m) * conc)


def _label_params(cfg: SimulatorConfig, label: MembershipLabel) -> tuple[float, tuple[float, float]]:
    if label is MembershipLabel.IN:
        return _member_params(cfg)
    return cfg.jitter_out, cfg.score_out


def sample_detections_with_truth(
    cfg: SimulatorConfig,
    label: MembershipLabel,
    rng: SeededRng,
    image_id: str = "sim-00000",
) -> tuple[DetectionSet, list[BBox]]:
    """Sample one image's detections plus the ground-truth rectangles.

    Objects get a uniform extent between 10% and 50% of each image dimension
    and a uniform in-frame position.  Every proposal is the object rectangle
    with independent Gaussian noise on all four corner coordinates (corners
    re-sorted if the noise inverts them) and a Beta-distributed confidence.
    The returned set is already clamped, score-filtered, and score-ordered
    (the standard harvest with thresholds 0.01 / 1.0).
    """
    jitter, score_params = _label_params(cfg, label)
    w, h = cfg.image_width, cfg.image_height
    boxes: list[ScoredBox] = []
    truths: list[BBox] = []
    n_objects = rng.randint(*cfg.objects_per_image)
    for _ in range(n_objects):
        gw = rng.uniform(_OBJ_MIN_FRAC, _OBJ_MAX_FRAC) * w
        gh = rng.uniform(_OBJ_MIN_FRAC, _OBJ_MAX_FRAC) * h
        cx = rng.uniform(0.5 * gw, w - 0.5 * gw)
        cy = rng.uniform(0.5 * gh, h - 0.5 * gh)
        truth = BBox(cx - 0.5 * gw, cy - 0.5 * gh, cx + 0.5 * gw, cy + 0.5 * gh)
        truths.append(truth)
        n_prop = rng.randint(*cfg.proposals_per_object)
        noise = rng.normal_array(4 * n_prop, std=jitter) if n_prop else None
        for p in range(n_prop):
            dx0, dy0, dx1, dy1 = noise[4 * p : 4 * p + 4]
            xa, xb = truth.x0 + dx0, truth.x1 + dx1
            ya, yb = truth.y0 + dy0, truth.y1 + dy1
            box = BBox(min(xa, xb), min(ya, yb), max(xa, xb), max(ya, yb))
            boxes.append(ScoredBox(box=box, score=rng.beta(*score_params)))
    raw = DetectionSet(image_id=image_id, width=w, height=h, boxes=tuple(boxes))
    return harvest(raw, _HARVEST), truths


def sample_detections(
    cfg: SimulatorConfig,
    label: MembershipLabel,
    rng: SeededRng,
    image_id: str = "sim-00000",
) -> DetectionSet:
    detections, _ = sample_detections_with_truth(cfg, label, rng, image_id)
    return detections


@dataclass(frozen=True)
class World:
    """Four record splits: two for the attacked detector, two for shadows."""

    target_in: tuple[MembershipRecord, ...]
    target_out: tuple[MembershipRecord, ...]
    shadow_in: tuple[MembershipRecord, ...]
    shadow_out: tuple[MembershipRecord, ...]

    def target_records(self) -> tuple[MembershipRecord, ...]:
        return self.target_in + self.target_out

    def shadow_records(self) -> tuple[MembershipRecord, ...]:
        return self.shadow_in + self.shadow_out


_SPLIT_LAYOUT = (
    ("target_in", MembershipLabel.IN, Source.TARGET),
    ("target_out", MembershipLabel.OUT, Source.TARGET),
    ("shadow_in", MembershipLabel.IN, Source.SHADOW),
    ("shadow_out", MembershipLabel.OUT, Source.SHADOW),
)


def generate_world(
    cfg: SimulatorConfig,
    n_per_split: int,
    seed: int,
    shadow_cfg: Optional[SimulatorConfig] = None,
) -> World:
    """Simulate all four splits, n_per_split records each.

    Each record draws from its own child stream keyed by (split name, index),
    so splits are independent and, in particular, the target records do not
    change when a different ``shadow_cfg`` is supplied for transfer setups.
    """
    if n_per_split < 1:
        raise ValueError(f"n_per_split must be >= 1, got {n_per_split}")
    root = SeededRng(seed)
    splits = []
    for split_name, label, source in _SPLIT_LAYOUT:
        split_cfg = cfg if source is Source.TARGET else (shadow_cfg or cfg)
        records = []
        for i in range(n_per_split):
            rec_rng = root.spawn(f"{split_name}/{i}")
            det = sample_detections(split_cfg, label, rec_rng, image_id=f"{split_name}-{i:05d}")
            records.append(MembershipRecord(detections=det, label=label, source=source))
        splits.append(tuple(records))
    return World(*splits)


def _sym_kl_centered_gaussians(s1: float, s2: float) -> float:
    """Symmetrized KL between N(0, s1^2) and N(0, s2^2)."""
    if s1 == s2:
        return 0.0
    if s1 == 0.0 or s2 == 0.0:
        return math.inf
    r = (s1 / s2) ** 2
    return 0.5 * (r + 1.0 / r) - 1.0


def _kl_beta(p: tuple[float, float], q: tuple[float, float]) -> float:
    ap, bp = p
    aq, bq = q
    return float(
        betaln(aq, bq)
        - betaln(ap, bp)
        + (ap - aq) * digamma(ap)
        + (bp - bq) * digamma(bp)
        + (aq + bq - ap - bp) * digamma(ap + bp)
    )


def separability_proxy(cfg: SimulatorConfig) -> float:
    """Closed-form divergence between member and non-member behavior.

    Sum of the symmetrized KL between the corner-jitter Gaussians and the
    symmetrized KL between the score Beta distributions, at the config's
    effective overfit level.  Zero iff the labels are indistinguishable;
    non-decreasing in overfit_level for the leaky preset.
    """
    jitter_m, score_m = _member_params(cfg)
    jitter_part = _sym_kl_centered_gaussians(jitter_m, cfg.jitter_out)
    if score_m == cfg.score_out:
        score_part = 0.0
    else:
        score_part = _kl_beta(score_m, cfg.score_out) + _kl_beta(cfg.score_out, score_m)
    return jitter_part + score_part
