"""Attack classifiers: specs, training entry points, prediction, persistence.

Membership is a two-class problem throughout; class index 0 means "in"
(training member) and index 1 means "out".  Probability vectors follow the
same order.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..canvas import Canvas
from ..core import MembershipLabel, SeededRng
from ..features import FeatureVector
from . import nn
from .gbt import GbtModel, GbtSpec, TreeNode, fit_gbt
from .nn import Network, TrainConfig

__all__ = [
    "CLASS_INDEX",
    "CnnSpec",
    "LogisticSpec",
    "CnnClassifier",
    "GbtClassifier",
    "LogisticClassifier",
    "build_cnn_network",
    "build_logistic_network",
    "cnn_train",
    "cnn_forward",
    "logistic_train",
    "gbt_train",
    "predict",
    "gradient_check",
    "save_model",
    "load_model",
]

CLASS_INDEX = {MembershipLabel.IN: 0, MembershipLabel.OUT: 1}

MODEL_FORMAT = "boxmia-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class CnnSpec:
    """Shallow convolutional attack model.

    Defaults follow the reference architecture (two conv blocks of 64 and
    128 channels, then fully connected layers of 128 and 2 units); each conv
    is followed by ReLU and stride-2 max pooling.  Desk-scale experiments
    typically shrink the channel counts for speed without changing shape.
    """

    conv_channels: tuple[int, ...] = (64, 128)
    fc_units: tuple[int, ...] = (128, 2)
    kernel_size: int = 3
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "fc_units", tuple(self.fc_units))
        if any(c < 1 for c in self.conv_channels):
            raise ValueError(f"conv channels must be positive, got {self.conv_channels}")
        if not self.fc_units or any(u < 1 for u in self.fc_units):
            raise ValueError(f"fc_units must be non-empty positives, got {self.fc_units}")
        if self.fc_units[-1] != 2:
            raise ValueError("final fc layer must have 2 units (in/out membership)")
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class LogisticSpec:
    """Softmax regression on flat features, with optional input dropout."""

    input_dim: int
    n_classes: int = 2
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def build_cnn_network(spec: CnnSpec, input_size: int, rng: SeededRng) -> Network:
    """Assemble conv/pool blocks then the fully connected head.

    The final layer starts at exactly zero so an untrained model outputs the
    uniform distribution; all other weights use seeded He-uniform draws, in
    layer order.
    """
    layers: list = []
    in_c, size = 1, input_size
    for c in spec.conv_channels:
        layers.append(nn.Conv2D(in_c, c, spec.kernel_size, rng))
        layers.append(nn.ReLU())
        layers.append(nn.MaxPool2())
        in_c, size = c, size // 2
        if size < 1:
            raise ValueError(f"input size {input_size} too small for {len(spec.conv_channels)} pooling stages")
    layers.append(nn.Flatten())
    n_in = in_c * size * size
    for units in spec.fc_units[:-1]:
        layers.append(nn.Dense(n_in, units, rng))
        layers.append(nn.ReLU())
        if spec.dropout_rate > 0:
            layers.append(nn.Dropout(spec.dropout_rate))
        n_in = units
    layers.append(nn.Dense(n_in, spec.fc_units[-1], None, zero_init=True))
    return Network(layers)


def build_logistic_network(spec: LogisticSpec, rng: SeededRng) -> Network:
    layers: list = []
    if spec.dropout_rate > 0:
        layers.append(nn.Dropout(spec.dropout_rate))
    # Zero start: the objective is convex, so no symmetry breaking is needed.
    layers.append(nn.Dense(spec.input_dim, spec.n_classes, None, zero_init=True))
    return Network(layers)


def _config_hash(*parts) -> str:
    blob = json.dumps([asdict(p) for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class CnnClassifier:
    spec: CnnSpec
    input_size: int
    network: Network
    norm_constant: float
    provenance: dict = field(default_factory=dict)

    def predict_proba(self, canvas: Canvas) -> np.ndarray:
        if canvas.size != self.input_size:
            raise ValueError(f"canvas size {canvas.size} != model input {self.input_size}")
        x = canvas.pixels[None, :, :] / self.norm_constant
        return self.network.predict_proba(x)


@dataclass
class GbtClassifier:
    spec: GbtSpec
    model: GbtModel
    provenance: dict = field(default_factory=dict)

    def predict_proba(self, features: FeatureVector) -> np.ndarray:
        p_in = self.model.predict_proba_one(features.values)
        return np.array([p_in, 1.0 - p_in])


@dataclass
class LogisticClassifier:
    spec: LogisticSpec
    network: Network
    provenance: dict = field(default_factory=dict)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.spec.input_dim,):
            raise ValueError(f"expected {self.spec.input_dim} features, got shape {x.shape}")
        return self.network.predict_proba(x)


def _canvas_training_arrays(
    data: Sequence[tuple[Canvas, MembershipLabel]]
) -> tuple[list[np.ndarray], list[int], int, float]:
    if not data:
        raise ValueError("training data must be non-empty")
    size = data[0][0].size
    if any(c.size != size for c, _ in data):
        raise ValueError("all training canvases must share one size")
    targets = [CLASS_INDEX[label] for _, label in data]
    if len(set(targets)) < 2:
        raise ValueError("training data must contain both in and out examples")
    stack = np.stack([c.pixels for c, _ in data])
    # Normalize by the 99th-percentile training intensity; fall back to the
    # max (then 1) when the canvases are sparse enough that p99 is zero.
    norm = float(np.percentile(stack, 99.0))
    if norm <= 0.0:
        norm = float(stack.max())
    if norm <= 0.0:
        norm = 1.0
    inputs = [stack[i][None, :, :] / norm for i in range(len(data))]
    return inputs, targets, size, norm


def cnn_train(
    spec: CnnSpec, data: Sequence[tuple[Canvas, MembershipLabel]], cfg: TrainConfig
) -> CnnClassifier:
    """Train the canvas CNN; fully determined by (spec, data, cfg.seed)."""
    inputs, targets, size, norm = _canvas_training_arrays(data)
    rng = SeededRng(cfg.seed)
    net = build_cnn_network(spec, size, rng.spawn("init"))
    history = nn.run_sgd(net, inputs, targets, cfg, rng)
    return CnnClassifier(
        spec=spec,
        input_size=size,
        network=net,
        norm_constant=norm,
        provenance={
            "kind": "cnn",
            "seed": cfg.seed,
            "config_hash": _config_hash(spec, cfg),
            "loss_history": history,
        },
    )


def cnn_forward(model: CnnClassifier, canvas: Canvas) -> np.ndarray:
    """Inference-mode class probabilities (p_in, p_out); sums to 1."""
    return model.predict_proba(canvas)


def logistic_train(
    spec: LogisticSpec, data: Sequence[tuple[np.ndarray, int]], cfg: TrainConfig
) -> LogisticClassifier:
    """Train softmax regression on (feature vector, class index) pairs."""
    if not data:
        raise ValueError("training data must be non-empty")
    inputs = [np.asarray(x, dtype=np.float64) for x, _ in data]
    targets = [int(t) for _, t in data]
    if any(x.shape != (spec.input_dim,) for x in inputs):
        raise ValueError(f"all inputs must have shape ({spec.input_dim},)")
    if any(not 0 <= t < spec.n_classes for t in targets):
        raise ValueError("class index out of range")
    rng = SeededRng(cfg.seed)
    net = build_logistic_network(spec, rng.spawn("init"))
    history = nn.run_sgd(net, inputs, targets, cfg, rng)
    return LogisticClassifier(
        spec=spec,
        network=net,
        provenance={
            "kind": "logistic",
            "seed": cfg.seed,
            "config_hash": _config_hash(spec, cfg),
            "loss_history": history,
        },
    )


def gbt_train(
    spec: GbtSpec,
    data: Sequence[tuple[FeatureVector, MembershipLabel]],
    seed: int = 0,
) -> GbtClassifier:
    """Fit boosted trees on feature vectors.

    Boosting itself is deterministic (exact greedy, no subsampling); the seed
    is recorded in provenance for interface uniformity.
    """
    if not data:
        raise ValueError("training data must be non-empty")
    dim = data[0][0].values.size
    if any(fv.values.size != dim for fv, _ in data):
        raise ValueError("all feature vectors must share one length")
    x = np.stack([fv.values for fv, _ in data])
    # Positive class is "in": y = 1 for members.
    y = np.array([1.0 if label is MembershipLabel.IN else 0.0 for _, label in data])
    model = fit_gbt(x, y, spec)
    return GbtClassifier(
        spec=spec,
        model=model,
        provenance={
            "kind": "gbt",
            "seed": seed,
            "config_hash": _config_hash(spec),
            "loss_history": model.loss_history,
        },
    )


def predict(model, example) -> np.ndarray:
    """Dispatch prediction by model/input kind; mismatches raise TypeError."""
    if isinstance(model, CnnClassifier):
        if not isinstance(example, Canvas):
            raise TypeError(f"CNN model expects a Canvas, got {type(example).__name__}")
        return model.predict_proba(example)
    if isinstance(model, GbtClassifier):
        if not isinstance(example, FeatureVector):
            raise TypeError(f"GBT model expects a FeatureVector, got {type(example).__name__}")
        return model.predict_proba(example)
    if isinstance(model, LogisticClassifier):
        return model.predict_proba(np.asarray(example, dtype=np.float64))
    raise TypeError(f"unknown model type {type(model).__name__}")


def gradient_check(
    model: CnnClassifier,
    sample: tuple[Canvas, MembershipLabel],
    epsilon: float = 1e-5,
    sample_size: int = 200,
    seed: int = 0,
) -> float:
    """Finite-difference check of the CNN gradient on one labeled canvas.

    Returns the max relative error over a seeded subsample of parameters;
    see :func:`boxmia.learners.nn.network_gradient_check` for the details.
    """
    canvas, label = sample
    x = canvas.pixels[None, :, :] / model.norm_constant
    return nn.network_gradient_check(
        model.network, x, CLASS_INDEX[label], epsilon, sample_size, seed
    )


# -- persistence -----------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d["shape"])


def _tree_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"value": node.value}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _tree_to_dict(node.left),
        "right": _tree_to_dict(node.right),
    }


def _tree_from_dict(d: dict) -> TreeNode:
    if "feature" not in d:
        return TreeNode(value=d["value"])
    return TreeNode(
        feature=d["feature"],
        threshold=d["threshold"],
        left=_tree_from_dict(d["left"]),
        right=_tree_from_dict(d["right"]),
    )


def save_model(model, path: str) -> None:
    """Write a versioned JSON snapshot that reloads bit-exactly.

    Parameter arrays are embedded as base64 little-endian float64, scalars as
    JSON numbers (Python emits shortest-roundtrip decimal for floats, so
    values survive unchanged).
    """
    doc: dict = {"format": MODEL_FORMAT, "version": MODEL_VERSION}
    if isinstance(model, CnnClassifier):
        doc.update(
            kind="cnn",
            spec=asdict(model.spec),
            input_size=model.input_size,
            norm_constant=model.norm_constant,
            params=[_encode_array(p) for p in model.network.param_arrays()],
            provenance=model.provenance,
        )
    elif isinstance(model, LogisticClassifier):
        doc.update(
            kind="logistic",
            spec=asdict(model.spec),
            params=[_encode_array(p) for p in model.network.param_arrays()],
            provenance=model.provenance,
        )
    elif isinstance(model, GbtClassifier):
        doc.update(
            kind="gbt",
            spec=asdict(model.spec),
            n_features=model.model.n_features,
            base_score=model.model.base_score,
            trees=[_tree_to_dict(t) for t in model.model.trees],
            loss_history=model.model.loss_history,
            provenance=model.provenance,
        )
    else:
        raise TypeError(f"cannot save model of type {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a model file: format {doc.get('format')!r}")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    kind = doc["kind"]
    if kind == "cnn":
        spec = CnnSpec(
            conv_channels=tuple(doc["spec"]["conv_channels"]),
            fc_units=tuple(doc["spec"]["fc_units"]),
            kernel_size=doc["spec"]["kernel_size"],
            dropout_rate=doc["spec"]["dropout_rate"],
        )
        net = build_cnn_network(spec, doc["input_size"], SeededRng(0))
        _load_params(net, doc["params"])
        return CnnClassifier(
            spec=spec,
            input_size=doc["input_size"],
            network=net,
            norm_constant=doc["norm_constant"],
            provenance=doc.get("provenance", {}),
        )
    if kind == "logistic":
        spec = LogisticSpec(**doc["spec"])
        net = build_logistic_network(spec, SeededRng(0))
        _load_params(net, doc["params"])
        return LogisticClassifier(spec=spec, network=net, provenance=doc.get("provenance", {}))
    if kind == "gbt":
        spec = GbtSpec(**doc["spec"])
        model = GbtModel(
            spec=spec,
            n_features=doc["n_features"],
            base_score=doc["base_score"],
            trees=[_tree_from_dict(t) for t in doc["trees"]],
            loss_history=list(doc["loss_history"]),
        )
        return GbtClassifier(spec=spec, model=model, provenance=doc.get("provenance", {}))
    raise ValueError(f"unknown model kind {kind!r}")


def _load_params(net: Network, encoded: list) -> None:
    arrays = net.param_arrays()
    if len(arrays) != len(encoded):
        raise ValueError(f"model file has {len(encoded)} arrays, network needs {len(arrays)}")
    for target, enc in zip(arrays, encoded):
        loaded = _decode_array(enc)
        if loaded.shape != target.shape:
            raise ValueError(f"array shape {loaded.shape} != expected {target.shape}")
        np.copyto(target, loaded)
