"""Differentially private SGD and its closed-form privacy accounting.

One private step clips each example's gradient to L2 norm at most the clip
bound, sums the clipped gradients, adds isotropic Gaussian noise with
standard deviation noise_scale * clip_bound, and divides by the batch size.
Accounting treats each epoch as one unit of Gaussian-mechanism privacy cost
rho = epochs / (2 * noise_scale^2) and converts to an (epsilon, delta)
guarantee via epsilon = rho + sqrt(rho * ln(1 / delta)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .core import SeededRng
from .learners import nn
from .learners.gbt import GbtSpec
from .learners.models import (
    CnnClassifier,
    CnnSpec,
    LogisticClassifier,
    LogisticSpec,
    _canvas_training_arrays,
    _config_hash,
    build_cnn_network,
    build_logistic_network,
)
from .learners.nn import TrainConfig

__all__ = [
    "PrivacyParams",
    "PrivacyReport",
    "UnsupportedLearnerError",
    "clip_gradient",
    "dp_sgd_step",
    "privacy_loss",
    "dp_train",
]


@dataclass(frozen=True)
class PrivacyParams:
    """Noise multiplier, clip bound, failure probability, and epoch budget.

    ``clip_bound`` may be infinite, which turns clipping off (useful for the
    exact-reduction-to-SGD checks).  ``epochs`` is the accounting unit count
    and may be fractional.
    """

    noise_scale: float = 1e-3
    clip_bound: float = 50.0
    delta: float = 1e-5
    epochs: float = 1.0

    def __post_init__(self) -> None:
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be positive, got {self.clip_bound}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


class UnsupportedLearnerError(TypeError):
    """Raised when private training is asked for a gradient-free learner."""


def clip_gradient(grad: np.ndarray, clip_bound: float) -> np.ndarray:
    """Rescale grad to L2 norm at most clip_bound: g / max(1, |g| / C).

    Gradients already inside the ball pass through unchanged (scale exactly
    1); an infinite bound disables clipping entirely.
    """
    if not clip_bound > 0:
        raise ValueError(f"clip_bound must be positive, got {clip_bound}")
    norm = float(np.linalg.norm(grad))
    return grad / max(1.0, norm / clip_bound)


def _noisy_mean(
    grads: Sequence[np.ndarray], clip_bound: float, noise_scale: float, rng: SeededRng
) -> np.ndarray:
    """Clip, sum in batch order, noise the sum, divide by the batch size.

    With noise_scale 0 the noise term is skipped outright, so the result is
    bit-identical to the plain clipped average.
    """
    acc = clip_gradient(grads[0], clip_bound)
    for g in grads[1:]:
        acc += clip_gradient(g, clip_bound)
    if noise_scale > 0:
        acc += (noise_scale * clip_bound) * rng.normal_array(acc.size)
    return acc / len(grads)


def dp_sgd_step(
    theta: np.ndarray,
    per_sample_grads: Sequence[np.ndarray],
    clip_bound: float,
    noise_scale: float,
    learning_rate: float,
    rng: SeededRng,
) -> np.ndarray:
    """One noisy descent step on a batch of per-sample gradients."""
    if not per_sample_grads:
        raise ValueError("batch must contain at least one gradient")
    return theta - learning_rate * _noisy_mean(
        per_sample_grads, clip_bound, noise_scale, rng
    )


def privacy_loss(noise_scale: float, epochs: float, delta: float) -> float:
    """Epsilon of the (epsilon, delta) guarantee after ``epochs`` units.

    Zero epochs release nothing (epsilon 0, whatever the noise); zero noise
    with a positive budget provides no guarantee and returns infinity, the
    sentinel reported for undefended training.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if epochs == 0:
        return 0.0
    if noise_scale == 0:
        return math.inf
    rho = epochs / (2.0 * noise_scale * noise_scale)
    return rho + math.sqrt(rho * math.log(1.0 / delta))


@dataclass(frozen=True)
class PrivacyReport:
    epsilon: float
    noise_scale: float
    clip_bound: float
    delta: float
    realized_epochs: float


def dp_train(spec, data, train_cfg: TrainConfig, privacy: PrivacyParams):
    """Privately train a differentiable learner; returns (model, report).

    Supports the canvas CNN and logistic specs; boosted trees have no
    per-sample gradients to clip and raise :class:`UnsupportedLearnerError`.
    The reported epsilon is :func:`privacy_loss` evaluated at the number of
    epochs the run actually performed.  With noise_scale 0 and an infinite
    clip bound, the trained parameters match plain training bit for bit
    under the same seed.
    """
    if isinstance(spec, GbtSpec):
        raise UnsupportedLearnerError(
            "boosted trees expose no per-sample gradients; private training "
            "supports CnnSpec and LogisticSpec"
        )
    if not isinstance(spec, (CnnSpec, LogisticSpec)):
        raise UnsupportedLearnerError(f"unsupported learner spec {type(spec).__name__}")

    rng = SeededRng(train_cfg.seed)
    noise_rng = rng.spawn("dp_noise")
    combine = partial(
        _noisy_mean,
        clip_bound=privacy.clip_bound,
        noise_scale=privacy.noise_scale,
        rng=noise_rng,
    )
    epsilon = privacy_loss(privacy.noise_scale, float(train_cfg.epochs), privacy.delta)
    report = PrivacyReport(
        epsilon=epsilon,
        noise_scale=privacy.noise_scale,
        clip_bound=privacy.clip_bound,
        delta=privacy.delta,
        realized_epochs=float(train_cfg.epochs),
    )
    dp_note = {
        "dp": True,
        "noise_scale": privacy.noise_scale,
        "clip_bound": privacy.clip_bound,
        "delta": privacy.delta,
        "epsilon": epsilon,
    }

    if isinstance(spec, CnnSpec):
        inputs, targets, size, norm = _canvas_training_arrays(data)
        net = build_cnn_network(spec, size, rng.spawn("init"))
        history = nn.run_sgd(net, inputs, targets, train_cfg, rng, combine)
        model = CnnClassifier(
            spec=spec,
            input_size=size,
            network=net,
            norm_constant=norm,
            provenance={
                "kind": "cnn",
                "seed": train_cfg.seed,
                "config_hash": _config_hash(spec, train_cfg, privacy),
                "loss_history": history,
                **dp_note,
            },
        )
        return model, report

    inputs = [np.asarray(x, dtype=np.float64) for x, _ in data]
    targets = [int(t) for _, t in data]
    if any(x.shape != (spec.input_dim,) for x in inputs):
        raise ValueError(f"all inputs must have shape ({spec.input_dim},)")
    net = build_logistic_network(spec, rng.spawn("init"))
    history = nn.run_sgd(net, inputs, targets, train_cfg, rng, combine)
    model = LogisticClassifier(
        spec=spec,
        network=net,
        provenance={
            "kind": "logistic",
            "seed": train_cfg.seed,
            "config_hash": _config_hash(spec, train_cfg, privacy),
            "loss_history": history,
            **dp_note,
        },
    )
    return model, report
