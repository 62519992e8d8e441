"""Membership inference attacks on black-box object-detection outputs.

The package turns detector predictions (boxes plus confidences) into
attack-classifier inputs, either rasterized score canvases or flat feature
vectors, trains shadow-based attack models on them, and measures how well
membership survives defenses such as Dropout and differentially private
SGD.  A seeded detection simulator makes every experiment reproducible on a
desk machine, and the privacy accountant reports the matching epsilon.
"""

from .canvas import (
    Accumulation,
    BoxMode,
    Canvas,
    CanvasConfig,
    RESCALE_CAP,
    Transform,
    augment,
    render,
    rescale_score,
)
from .core import (
    BBox,
    DetectionSet,
    MembershipLabel,
    MembershipRecord,
    ScoredBox,
    SeededRng,
    Source,
    split_dataset,
)
from .features import FeatureVector, vectorize
from .learners import (
    CnnSpec,
    GbtSpec,
    LogisticSpec,
    TrainConfig,
    cnn_train,
    gbt_train,
    gradient_check,
    load_model,
    logistic_train,
    predict,
    save_model,
)
from .pipeline import (
    AttackExperiment,
    AttackKind,
    AttackMetrics,
    AttackResult,
    DefenseKind,
    DefenseSpec,
    ProvenanceError,
    SurrogateTaskConfig,
    build_attack_dataset,
    defense_eval,
    overfit_sweep,
    run_attack,
    transfer_attack,
)
from .postprocess import PostprocessConfig, harvest, iou, nms, score_filter
from .privacy import (
    PrivacyParams,
    PrivacyReport,
    UnsupportedLearnerError,
    clip_gradient,
    dp_sgd_step,
    dp_train,
    privacy_loss,
)
from .simulator import (
    SimulatorConfig,
    World,
    generate_world,
    leaky_preset,
    null_preset,
    sample_detections,
    separability_proxy,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Accumulation",
    "AttackExperiment",
    "AttackKind",
    "AttackMetrics",
    "AttackResult",
    "BBox",
    "BoxMode",
    "Canvas",
    "CanvasConfig",
    "CnnSpec",
    "DefenseKind",
    "DefenseSpec",
    "DetectionSet",
    "FeatureVector",
    "GbtSpec",
    "LogisticSpec",
    "MembershipLabel",
    "MembershipRecord",
    "PostprocessConfig",
    "PrivacyParams",
    "PrivacyReport",
    "ProvenanceError",
    "RESCALE_CAP",
    "ScoredBox",
    "SeededRng",
    "SimulatorConfig",
    "Source",
    "SurrogateTaskConfig",
    "TrainConfig",
    "Transform",
    "UnsupportedLearnerError",
    "World",
    "augment",
    "build_attack_dataset",
    "clip_gradient",
    "cnn_train",
    "defense_eval",
    "dp_sgd_step",
    "dp_train",
    "gbt_train",
    "generate_world",
    "gradient_check",
    "harvest",
    "iou",
    "leaky_preset",
    "load_model",
    "logistic_train",
    "nms",
    "null_preset",
    "overfit_sweep",
    "predict",
    "privacy_loss",
    "render",
    "rescale_score",
    "run_attack",
    "sample_detections",
    "save_model",
    "score_filter",
    "separability_proxy",
    "split_dataset",
    "transfer_attack",
    "vectorize",
]
