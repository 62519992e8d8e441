"""Shared value types, deterministic randomness, and dataset partitioning.

Everything downstream (simulation, training, attacks) draws randomness from
:class:`SeededRng` so that a run is a pure function of its seeds.  Ambient
entropy sources (``random``, ``np.random`` globals, clocks) are never used.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "BBox",
    "ScoredBox",
    "DetectionSet",
    "MembershipLabel",
    "Source",
    "MembershipRecord",
    "SeededRng",
    "SplitSpec",
    "DatasetSplits",
    "DuplicateIdError",
    "split_dataset",
]

_MASK64 = (1 << 64) - 1
# splitmix64 constants (Steele, Lea & Flood's mixing function).
_GOLDEN = 0x9E3779B97F4F7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with corner coordinates, x0 <= x1 and y0 <= y1."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"BBox.{name} must be finite, got {v!r}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(
                f"BBox corners must be ordered, got ({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


@dataclass(frozen=True)
class ScoredBox:
    """A box with a detection confidence in [0, 1] and an optional class id."""

    box: BBox
    score: float
    class_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")


@dataclass(frozen=True)
class DetectionSet:
    """All detections reported for one image.

    Raw ingested boxes may exceed the image bounds; the postprocess clamp is
    what establishes in-bounds coordinates.  ``meta`` carries provenance
    annotations (e.g. the postprocess settings that produced the set) and is
    excluded from equality.
    """

    image_id: str
    width: float
    height: float
    boxes: tuple[ScoredBox, ...]
    meta: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def scores(self) -> np.ndarray:
        return np.array([sb.score for sb in self.boxes], dtype=np.float64)


class MembershipLabel(Enum):
    IN = "in"
    OUT = "out"


class Source(Enum):
    """Which world a record came from; attack training may only touch SHADOW."""

    TARGET = "target"
    SHADOW = "shadow"


@dataclass(frozen=True)
class MembershipRecord:
    detections: DetectionSet
    label: MembershipLabel
    source: Source


def _mix64_array(words: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer applied elementwise to uint64 words."""
    z = words.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class SeededRng:
    """Counter-based deterministic generator (splitmix64 stream).

    Word ``i`` of the stream is ``mix64(seed + (i + 1) * golden_gamma)``, the
    same sequence a stateful splitmix64 seeded with ``seed`` would emit.
    Uniform doubles take the top 53 bits of a word; Gaussians use the
    Box-Muller transform on uniform pairs, so every draw is reproducible from
    (seed, call sequence) alone, independent of platform RNG state.

    Child streams come from :meth:`spawn`, which hashes (parent seed, label)
    with BLAKE2b.  Spawning is a function of the parent seed only, not of how
    far the parent stream has advanced, so sibling streams never overlap and
    reordering spawn calls does not change any stream's contents.  Labels must
    be unique among siblings.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & _MASK64)
        self._counter = 0

    @property
    def seed(self) -> int:
        return int(self._seed)

    def _next_words(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64_array(self._seed + idx * np.uint64(_GOLDEN))

    def spawn(self, label: str) -> "SeededRng":
        digest = hashlib.blake2b(
            label.encode("utf-8"), digest_size=8, key=int(self._seed).to_bytes(8, "little")
        ).digest()
        return SeededRng(int.from_bytes(digest, "little"))

    # -- uniform -----------------------------------------------------------

    def uniform_array(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n doubles uniform on [low, high), each from one 64-bit word."""
        u = (self._next_words(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return low + u * (high - low)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.uniform_array(1, low, high)[0])

    # -- Gaussian ----------------------------------------------------------

    def normal_array(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """n Gaussian draws via Box-Muller; consumes 2 * ceil(n / 2) words.

        Each uniform pair (u1, u2) yields r*cos(a) then r*sin(a) with
        r = sqrt(-2 ln(1 - u1)) and a = 2 pi u2; 1 - u1 > 0 always holds
        because uniforms live on [0, 1).
        """
        pairs = (n + 1) // 2
        u = self.uniform_array(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[:pairs]))
        a = (2.0 * np.pi) * u[pairs:]
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(a)
        out[1::2] = r * np.sin(a)
        return mean + std * out[:n]

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        return float(self.normal_array(1, mean, std)[0])

    # -- integers and shuffling -------------------------------------------

    def randint(self, low: int, high: int) -> int:
        """One integer uniform on the inclusive range [low, high]."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        span = high - low + 1
        return low + int(self.uniform() * span)

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n) by stable argsort of n uniform keys."""
        return np.argsort(self.uniform_array(n), kind="stable")

    def shuffle(self, items: Sequence) -> list:
        return [items[i] for i in self.permutation(len(items))]

    # -- gamma / beta ------------------------------------------------------

    def gamma(self, shape: float) -> float:
        """Gamma(shape, 1) via Marsaglia-Tsang squeeze-free rejection."""
        if shape <= 0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            # Boost: Gamma(a) = Gamma(a + 1) * U^(1/a).
            return self.gamma(shape + 1.0) * self.uniform() ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = self.uniform()
            # log1p(-u) is distributed as log(U) for U uniform on (0, 1].
            if math.log1p(-u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def beta(self, a: float, b: float) -> float:
        """Beta(a, b) as a gamma ratio; always in (0, 1)."""
        ga = self.gamma(a)
        gb = self.gamma(b)
        return ga / (ga + gb)


class DuplicateIdError(ValueError):
    """An id appeared more than once in a dataset to be partitioned."""


@dataclass(frozen=True)
class SplitSpec:
    """Seed plus fractions for (target_in, target_out, shadow_in, shadow_out)."""

    seed: int
    fractions: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self) -> None:
        if len(self.fractions) != 4:
            raise ValueError("exactly four split fractions are required")
        if any(f < 0 for f in self.fractions):
            raise ValueError(f"fractions must be non-negative, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)!r}")


@dataclass(frozen=True)
class DatasetSplits:
    target_in: tuple[str, ...]
    target_out: tuple[str, ...]
    shadow_in: tuple[str, ...]
    shadow_out: tuple[str, ...]

    def all_ids(self) -> tuple[str, ...]:
        return self.target_in + self.target_out + self.shadow_in + self.shadow_out


def _largest_remainder_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer allocation of n by largest remainder; ties favor earlier slots."""
    quotas = [f * n for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    leftovers = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftovers]:
        counts[i] += 1
    return counts


def split_dataset(ids: Iterable[str], spec: SplitSpec) -> DatasetSplits:
    """Partition ids into the four membership splits.

    Ids are sorted lexicographically before the seeded shuffle, so the result
    depends only on the id multiset and the seed, not on input order.  Counts
    follow largest-remainder apportionment of the configured fractions, in
    the fixed order target_in, target_out, shadow_in, shadow_out.
    """
    id_list = sorted(ids)
    seen = set()
    for i in id_list:
        if i in seen:
            raise DuplicateIdError(f"duplicate id {i!r}")
        seen.add(i)
    shuffled = SeededRng(spec.seed).shuffle(id_list)
    counts = _largest_remainder_counts(len(shuffled), spec.fractions)
    parts = []
    start = 0
    for c in counts:
        parts.append(tuple(shuffled[start : start + c]))
        start += c
    return DatasetSplits(*parts)
