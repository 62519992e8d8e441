"""End-to-end attack experiments: dataset assembly, training, evaluation.

The contract that matters most here is provenance: attack models train on
shadow-world records only.  Target records exist to be attacked, never to be
learned from, and :func:`run_attack` refuses inputs that mix that up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .canvas import Canvas, CanvasConfig, Transform, augment, render
from .core import MembershipLabel, MembershipRecord, SeededRng, Source
from .features import FeatureVector, vectorize
from .learners import (
    CnnSpec,
    GbtSpec,
    LogisticSpec,
    TrainConfig,
    cnn_train,
    gbt_train,
    logistic_train,
    predict,
)
from .postprocess import PostprocessConfig, harvest
from .privacy import PrivacyParams, PrivacyReport, UnsupportedLearnerError, dp_train, privacy_loss
from .simulator import SimulatorConfig, World, generate_world

__all__ = [
    "AttackKind",
    "AttackExperiment",
    "AttackMetrics",
    "AttackResult",
    "ProvenanceError",
    "build_attack_dataset",
    "balance_records",
    "run_attack",
    "transfer_attack",
    "overfit_sweep",
    "DefenseKind",
    "DefenseSpec",
    "SurrogateTaskConfig",
    "DefenseRow",
    "defense_eval",
]


class AttackKind(Enum):
    CANVAS_CNN = "canvas_cnn"
    GBT_VECTOR = "gbt_vector"


class ProvenanceError(ValueError):
    """Raised when target-derived records would leak into attack training."""


@dataclass(frozen=True)
class AttackExperiment:
    """Everything that defines one attack run apart from the records.

    ``seed`` governs every random choice in the run (balancing, holdout,
    learner init, batching); the seed inside ``train_cfg`` is ignored here
    and replaced by a derived stream so that one experiment seed is the whole
    story.
    """

    kind: AttackKind = AttackKind.CANVAS_CNN
    canvas_cfg: CanvasConfig = field(default_factory=CanvasConfig)
    postprocess_cfg: PostprocessConfig = field(default_factory=PostprocessConfig)
    augmentations: tuple[Transform, ...] = ()
    cnn_spec: CnnSpec = field(default_factory=CnnSpec)
    gbt_spec: GbtSpec = field(default_factory=GbtSpec)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    n_max: int = 100
    balance: bool = True
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "augmentations", tuple(self.augmentations))
        if len(set(self.augmentations)) != len(self.augmentations):
            raise ValueError(f"duplicate augmentations in {self.augmentations}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError(
                f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}"
            )


@dataclass(frozen=True)
class AttackMetrics:
    """Binary attack quality; "in" (member) is the positive class."""

    tp: int
    fn: int
    fp: int
    tn: int
    accuracy: float
    recall_in: float
    recall_out: float
    average_recall: float

    @classmethod
    def from_counts(cls, tp: int, fn: int, fp: int, tn: int) -> "AttackMetrics":
        total = tp + fn + fp + tn
        recall_in = tp / (tp + fn) if tp + fn else 0.0
        recall_out = tn / (tn + fp) if tn + fp else 0.0
        return cls(
            tp=tp,
            fn=fn,
            fp=fp,
            tn=tn,
            accuracy=(tp + tn) / total if total else 0.0,
            recall_in=recall_in,
            recall_out=recall_out,
            average_recall=(recall_in + recall_out) / 2.0,
        )


@dataclass(frozen=True)
class AttackResult:
    target: AttackMetrics
    validation: AttackMetrics


def balance_records(
    records: Sequence[MembershipRecord], rng: SeededRng
) -> list[MembershipRecord]:
    """Downsample the majority label to the minority count.

    The kept subset is chosen by a seeded draw and returned in the original
    record order, so balancing is reproducible and order-stable.
    """
    by_label = {MembershipLabel.IN: [], MembershipLabel.OUT: []}
    for idx, rec in enumerate(records):
        by_label[rec.label].append(idx)
    if any(not v for v in by_label.values()):
        raise ValueError("balancing requires both in and out records")
    n_keep = min(len(v) for v in by_label.values())
    keep: set[int] = set()
    for label in (MembershipLabel.IN, MembershipLabel.OUT):
        idxs = by_label[label]
        chosen = rng.permutation(len(idxs))[:n_keep]
        keep.update(idxs[i] for i in chosen)
    return [rec for idx, rec in enumerate(records) if idx in keep]


def _record_example(rec: MembershipRecord, exp: AttackExperiment):
    det = harvest(rec.detections, exp.postprocess_cfg)
    if exp.kind is AttackKind.CANVAS_CNN:
        return render(det, exp.canvas_cfg)
    return vectorize(det, exp.n_max)


def build_attack_dataset(
    records: Sequence[MembershipRecord],
    exp: AttackExperiment,
    *,
    augment_examples: bool = True,
    balance: Optional[bool] = None,
    rng: Optional[SeededRng] = None,
) -> list[tuple[object, MembershipLabel]]:
    """Harvest, optionally balance, then encode records as model examples.

    Canvas experiments with augmentation enabled emit the original canvas
    followed by one transformed copy per configured transform, multiplying
    the example count; vector experiments never augment.  Balancing happens
    before encoding and defaults to the experiment setting (it requires an
    rng; callers doing their own balancing pass ``balance=False``).
    """
    do_balance = exp.balance if balance is None else balance
    recs = list(records)
    if do_balance:
        if rng is None:
            rng = SeededRng(exp.seed).spawn("balance")
        recs = balance_records(recs, rng)
    out: list[tuple[object, MembershipLabel]] = []
    use_aug = augment_examples and exp.kind is AttackKind.CANVAS_CNN and exp.augmentations
    for rec in recs:
        example = _record_example(rec, exp)
        out.append((example, rec.label))
        if use_aug:
            for transform in exp.augmentations:
                out.append((augment(example, transform), rec.label))
    return out


def _stratified_holdout(
    records: Sequence[MembershipRecord], fraction: float, rng: SeededRng
) -> tuple[list[MembershipRecord], list[MembershipRecord]]:
    """Per-label seeded split; the held-out part gets floor(fraction * n)."""
    train: list[MembershipRecord] = []
    held: list[MembershipRecord] = []
    for label in (MembershipLabel.IN, MembershipLabel.OUT):
        group = [r for r in records if r.label is label]
        n_held = int(fraction * len(group))
        perm = rng.permutation(len(group))
        held_idx = set(int(i) for i in perm[:n_held])
        held.extend(group[i] for i in range(len(group)) if i in held_idx)
        train.extend(group[i] for i in range(len(group)) if i not in held_idx)
    return train, held


def _evaluate(model, examples: Sequence[tuple[object, MembershipLabel]]) -> AttackMetrics:
    tp = fn = fp = tn = 0
    for example, label in examples:
        p_in = float(predict(model, example)[0])
        # Ties (exactly 0.5, e.g. an untrained model) resolve to "out".
        predicted_in = p_in > 0.5
        if label is MembershipLabel.IN:
            tp, fn = tp + predicted_in, fn + (not predicted_in)
        else:
            fp, tn = fp + predicted_in, tn + (not predicted_in)
    return AttackMetrics.from_counts(tp, fn, fp, tn)


def _check_disjoint(shadow: Sequence[MembershipRecord], target: Sequence[MembershipRecord]) -> None:
    shadow_ids = {r.detections.image_id for r in shadow}
    target_ids = {r.detections.image_id for r in target}
    overlap = shadow_ids & target_ids
    if overlap:
        raise ValueError(f"shadow and target share image ids: {sorted(overlap)[:5]}")


def _train_attack_model(
    examples: Sequence[tuple[object, MembershipLabel]], exp: AttackExperiment, seed: int
):
    if exp.kind is AttackKind.CANVAS_CNN:
        cfg = replace(exp.train_cfg, seed=seed)
        return cnn_train(exp.cnn_spec, examples, cfg)
    return gbt_train(exp.gbt_spec, examples, seed=seed)


def run_attack(
    shadow_records: Sequence[MembershipRecord],
    target_records: Sequence[MembershipRecord],
    exp: AttackExperiment,
) -> AttackResult:
    """Train on shadow records, evaluate on every target record.

    Shadow records are balanced, split into train/validation holdout, and
    (for canvas experiments) augmented on the training side only.  Target
    records are scored unaugmented and unbalanced.  Records must come with
    correct provenance: any TARGET-sourced record in the shadow input raises
    :class:`ProvenanceError`, and the two sides must use disjoint image ids.
    """
    for rec in shadow_records:
        if rec.source is not Source.SHADOW:
            raise ProvenanceError(
                f"record {rec.detections.image_id!r} is {rec.source.value}-sourced; "
                "attack training accepts shadow records only"
            )
    for rec in target_records:
        if rec.source is not Source.TARGET:
            raise ProvenanceError(
                f"evaluation record {rec.detections.image_id!r} is not target-sourced"
            )
    _check_disjoint(shadow_records, target_records)
    labels = {r.label for r in shadow_records}
    if labels != {MembershipLabel.IN, MembershipLabel.OUT}:
        raise ValueError("shadow records must contain both in and out examples")

    root = SeededRng(exp.seed)
    recs = list(shadow_records)
    if exp.balance:
        recs = balance_records(recs, root.spawn("balance"))
    train_recs, val_recs = _stratified_holdout(
        recs, exp.holdout_fraction, root.spawn("holdout")
    )
    train_examples = build_attack_dataset(
        train_recs, exp, augment_examples=True, balance=False
    )
    model = _train_attack_model(train_examples, exp, seed=root.spawn("train").seed)
    val_examples = build_attack_dataset(val_recs, exp, augment_examples=False, balance=False)
    target_examples = build_attack_dataset(
        target_records, exp, augment_examples=False, balance=False
    )
    return AttackResult(
        target=_evaluate(model, target_examples),
        validation=_evaluate(model, val_examples),
    )


def transfer_attack(
    shadow_records: Sequence[MembershipRecord],
    target_records: Sequence[MembershipRecord],
    exp: AttackExperiment,
) -> AttackResult:
    """Attack a target world with shadows from a possibly different world.

    This is :func:`run_attack` applied across worlds; with identical worlds
    it reduces to a plain run.  The interesting case is a shadow simulator
    config that only approximates the target's, which measures how much the
    attack depends on matching detector behavior.
    """
    return run_attack(shadow_records, target_records, exp)


def overfit_sweep(
    levels: Sequence[float],
    exp: AttackExperiment,
    sim_cfg: SimulatorConfig,
    n_per_split: int,
    world_seed: int = 0,
) -> list[tuple[float, AttackMetrics]]:
    """Attack accuracy as a function of simulator overfit level.

    Builds one independent world per level (child seeds of ``world_seed``)
    and runs the same experiment against each.  Returns (level, target
    metrics) pairs in input order.
    """
    if any(not 0.0 <= lv <= 1.0 for lv in levels):
        raise ValueError("levels must lie in [0, 1]")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    seed_root = SeededRng(world_seed)
    points: list[tuple[float, AttackMetrics]] = []
    for i, level in enumerate(levels):
        cfg = replace(sim_cfg, overfit_level=float(level))
        world = generate_world(cfg, n_per_split, seed=seed_root.spawn(f"level/{i}").seed)
        result = run_attack(world.shadow_records(), world.target_records(), exp)
        points.append((float(level), result.target))
    return points


# -- defense study ---------------------------------------------------------


class DefenseKind(Enum):
    NONE = "none"
    DROPOUT = "dropout"
    DP = "dp"


@dataclass(frozen=True)
class DefenseSpec:
    kind: DefenseKind
    dropout_rate: float = 0.5
    privacy: Optional[PrivacyParams] = None

    def __post_init__(self) -> None:
        if self.kind is DefenseKind.DP and self.privacy is None:
            raise ValueError("DP defense requires PrivacyParams")
        if self.kind is DefenseKind.DROPOUT and not 0.0 < self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in (0, 1), got {self.dropout_rate}")

    def label(self) -> str:
        if self.kind is DefenseKind.DROPOUT:
            return f"dropout({self.dropout_rate})"
        if self.kind is DefenseKind.DP:
            return f"dp(sigma={self.privacy.noise_scale})"
        return "none"


@dataclass(frozen=True)
class SurrogateTaskConfig:
    """Synthetic binary task the defended surrogate model trains on.

    Inputs are standard Gaussians in ``input_dim`` dimensions, labeled by a
    random hyperplane and flipped with probability ``label_noise``; the noise
    is what gives a high-capacity trained-to-convergence model something to
    memorize, which is the membership signal the threshold attack reads off.
    """

    input_dim: int = 32
    n_per_split: int = 64
    n_test: int = 256
    label_noise: float = 0.1

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.n_per_split < 2 or self.n_test < 1:
            raise ValueError("task sizes must be positive (n_per_split >= 2)")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")


@dataclass(frozen=True)
class DefenseRow:
    defense: str
    utility_train: float
    utility_test: float
    attack: AttackMetrics
    epsilon: float


def _make_task(cfg: SurrogateTaskConfig, rng: SeededRng):
    """All five example sets of the surrogate task, sharing one hyperplane."""
    direction = rng.spawn("direction").normal_array(cfg.input_dim)
    direction /= float(np.linalg.norm(direction))

    def sample(n: int, stream: SeededRng) -> list[tuple[np.ndarray, int]]:
        out = []
        for _ in range(n):
            x = stream.normal_array(cfg.input_dim)
            label = 1 if float(x @ direction) > 0.0 else 0
            if stream.uniform() < cfg.label_noise:
                label = 1 - label
            out.append((x, label))
        return out

    return {
        "target_in": sample(cfg.n_per_split, rng.spawn("target_in")),
        "target_out": sample(cfg.n_per_split, rng.spawn("target_out")),
        "shadow_in": sample(cfg.n_per_split, rng.spawn("shadow_in")),
        "shadow_out": sample(cfg.n_per_split, rng.spawn("shadow_out")),
        "test": sample(cfg.n_test, rng.spawn("test")),
    }


def _accuracy(model, data: Sequence[tuple[np.ndarray, int]]) -> float:
    correct = sum(1 for x, y in data if int(np.argmax(predict(model, x))) == y)
    return correct / len(data)


def _confidences(model, data: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    return np.array([float(predict(model, x)[y]) for x, y in data])


def _fit_threshold(member_conf: np.ndarray, non_member_conf: np.ndarray) -> float:
    """Threshold maximizing balanced accuracy of "member iff conf >= t".

    Candidates are the observed confidence values; ties resolve to the
    lowest threshold, scanning in ascending order.
    """
    candidates = np.unique(np.concatenate([member_conf, non_member_conf]))
    best_t, best_score = 0.5, -1.0
    for t in candidates:
        recall_in = float(np.mean(member_conf >= t))
        recall_out = float(np.mean(non_member_conf < t))
        score = 0.5 * (recall_in + recall_out)
        if score > best_score:
            best_t, best_score = float(t), score
    return best_t


def _threshold_metrics(
    member_conf: np.ndarray, non_member_conf: np.ndarray, threshold: float
) -> AttackMetrics:
    tp = int(np.sum(member_conf >= threshold))
    fn = member_conf.size - tp
    fp = int(np.sum(non_member_conf >= threshold))
    tn = non_member_conf.size - fp
    return AttackMetrics.from_counts(tp, fn, fp, tn)


def _train_surrogate(spec, data, cfg: TrainConfig, defense: DefenseSpec):
    """Train one surrogate under a defense; returns (model, epsilon)."""
    if defense.kind is DefenseKind.DP:
        model, report = dp_train(spec, data, cfg, defense.privacy)
        return model, report.epsilon
    if isinstance(spec, LogisticSpec):
        if defense.kind is DefenseKind.DROPOUT:
            spec = replace(spec, dropout_rate=defense.dropout_rate)
        return logistic_train(spec, data, cfg), math.inf
    if isinstance(spec, CnnSpec):
        if defense.kind is DefenseKind.DROPOUT:
            spec = replace(spec, dropout_rate=defense.dropout_rate)
        return cnn_train(spec, data, cfg), math.inf
    raise UnsupportedLearnerError(
        f"defense evaluation needs a differentiable surrogate, got {type(spec).__name__}"
    )


def defense_eval(
    defenses: Sequence[DefenseSpec],
    task: SurrogateTaskConfig,
    train_cfg: TrainConfig,
    seed: int = 0,
    surrogate_spec=None,
) -> list[DefenseRow]:
    """Measure each defense's utility cost and attack resistance.

    For every defense, a target and a shadow surrogate are trained on their
    "in" splits of a common synthetic task.  The attack reads the surrogate's
    confidence in the observed label, fits the best balanced-accuracy
    threshold on the shadow model's member/non-member confidences, and
    applies it to the target model.  Rows report train/test task accuracy
    (the utility analog), the attack metrics, and the accounted epsilon
    (infinite for non-DP rows, where nothing bounds the privacy loss).
    """
    if surrogate_spec is None:
        surrogate_spec = LogisticSpec(input_dim=task.input_dim)
    root = SeededRng(seed)
    splits = _make_task(task, root.spawn("task"))
    rows: list[DefenseRow] = []
    for d_idx, defense in enumerate(defenses):
        tag = f"defense/{d_idx}"
        target_cfg = replace(train_cfg, seed=root.spawn(f"{tag}/target").seed)
        shadow_cfg = replace(train_cfg, seed=root.spawn(f"{tag}/shadow").seed)
        target_model, epsilon = _train_surrogate(
            surrogate_spec, splits["target_in"], target_cfg, defense
        )
        shadow_model, _ = _train_surrogate(
            surrogate_spec, splits["shadow_in"], shadow_cfg, defense
        )
        threshold = _fit_threshold(
            _confidences(shadow_model, splits["shadow_in"]),
            _confidences(shadow_model, splits["shadow_out"]),
        )
        attack = _threshold_metrics(
            _confidences(target_model, splits["target_in"]),
            _confidences(target_model, splits["target_out"]),
            threshold,
        )
        rows.append(
            DefenseRow(
                defense=defense.label(),
                utility_train=_accuracy(target_model, splits["target_in"]),
                utility_test=_accuracy(target_model, splits["test"]),
                attack=attack,
                epsilon=epsilon,
            )
        )
    return rows
