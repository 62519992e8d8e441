"""From-scratch neural network layers with exact per-sample gradients.

Everything operates on float64, one example at a time: forward passes cache
what backward needs, and gradients come back as one flat vector per example.
Per-sample gradients are first-class (rather than batch-averaged inside the
layers) because differentially private training must clip each example's
gradient individually; the plain trainer simply averages the same per-sample
vectors, which keeps the two training paths bit-comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..core import SeededRng

__all__ = [
    "Conv2D",
    "ReLU",
    "MaxPool2",
    "Flatten",
    "Dense",
    "Dropout",
    "Network",
    "TrainConfig",
    "softmax",
    "run_sgd",
    "mean_flat_gradients",
    "network_gradient_check",
]


class Conv2D:
    """3x3-style convolution, stride 1, zero padding that preserves H and W.

    Weights are He-style uniform on [-sqrt(6/fan_in), sqrt(6/fan_in)] with
    fan_in = in_channels * kernel^2; biases start at zero.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: SeededRng):
        if kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd for symmetric padding, got {kernel}")
        limit = math.sqrt(6.0 / (in_channels * kernel * kernel))
        self.w = rng.uniform_array(
            out_channels * in_channels * kernel * kernel, -limit, limit
        ).reshape(out_channels, in_channels, kernel, kernel)
        self.b = np.zeros(out_channels)
        self.kernel = kernel
        self.params = [self.w, self.b]

    def forward(self, x, train, rng):
        k = self.kernel
        pad = (k - 1) // 2
        c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        # (C, H, W, k, k) windows -> rows of flattened patches, one per pixel.
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        cols = win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)
        w_mat = self.w.reshape(self.w.shape[0], -1)
        out = cols @ w_mat.T + self.b
        cache = (cols, x.shape)
        return out.T.reshape(self.w.shape[0], h, w), cache

    def backward(self, dout, cache):
        cols, (c, h, w) = cache
        k = self.kernel
        pad = (k - 1) // 2
        out_c = self.w.shape[0]
        dout_mat = dout.reshape(out_c, h * w).T
        db = dout_mat.sum(axis=0)
        dw = (dout_mat.T @ cols).reshape(self.w.shape)
        dcols = dout_mat @ self.w.reshape(out_c, -1)
        # col2im: scatter-add each kernel offset back onto the padded grid.
        dxp = np.zeros((c, h + 2 * pad, w + 2 * pad))
        dcols_r = dcols.reshape(h, w, c, k, k).transpose(2, 0, 1, 3, 4)
        for di in range(k):
            for dj in range(k):
                dxp[:, di : di + h, dj : dj + w] += dcols_r[:, :, :, di, dj]
        dx = dxp[:, pad : pad + h, pad : pad + w]
        return dx, [dw, db]


class ReLU:
    params: list = []

    def forward(self, x, train, rng):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, dout, cache):
        return dout * cache, []


class MaxPool2:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    params: list = []

    def forward(self, x, train, rng):
        c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        v = x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
        windows = v.transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
        idx = windows.argmax(axis=3)
        out = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout, cache):
        idx, (c, h, w) = cache
        h2, w2 = h // 2, w // 2
        dwin = np.zeros((c, h2, w2, 4))
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=3)
        dx = np.zeros((c, h, w))
        dx[:, : 2 * h2, : 2 * w2] = (
            dwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
        )
        return dx, []


class Flatten:
    params: list = []

    def forward(self, x, train, rng):
        return x.ravel(), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), []


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: Optional[SeededRng], zero_init: bool = False):
        if zero_init:
            self.w = np.zeros((n_in, n_out))
        else:
            limit = math.sqrt(6.0 / n_in)
            self.w = rng.uniform_array(n_in * n_out, -limit, limit).reshape(n_in, n_out)
        self.b = np.zeros(n_out)
        self.params = [self.w, self.b]

    def forward(self, x, train, rng):
        return x @ self.w + self.b, x

    def backward(self, dout, cache):
        return self.w @ dout, [np.outer(cache, dout), dout.copy()]


class Dropout:
    """Inverted dropout: training scales survivors by 1/(1-rate), inference
    is the identity, so no rescaling is needed at prediction time."""

    params: list = []

    def __init__(self, rate: float):
        if not 0.0 < rate < 1.0:
            raise ValueError(f"dropout rate must lie in (0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train, rng):
        if not train:
            return x, None
        keep = rng.uniform_array(x.size).reshape(x.shape) >= self.rate
        mask = keep.astype(np.float64) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dout, cache):
        if cache is None:
            return dout, []
        return dout * cache, []


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


class Network:
    """Ordered layer stack trained with softmax cross-entropy."""

    def __init__(self, layers: Sequence):
        self.layers = list(layers)

    def param_arrays(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.param_arrays())

    def flat_params(self) -> np.ndarray:
        arrays = self.param_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in arrays])

    def set_flat_params(self, flat: np.ndarray) -> None:
        if flat.size != self.n_params:
            raise ValueError(f"parameter vector length {flat.size}, expected {self.n_params}")
        offset = 0
        for p in self.param_arrays():
            np.copyto(p, flat[offset : offset + p.size].reshape(p.shape))
            offset += p.size

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[SeededRng] = None):
        caches = []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(out, train, rng)
            caches.append(cache)
        return out, caches

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(x, train=False)
        return softmax(logits)

    def loss_and_gradient(
        self, x: np.ndarray, target: int, train: bool = False, rng: Optional[SeededRng] = None
    ) -> tuple[float, np.ndarray]:
        """Cross-entropy loss for one example and its flat parameter gradient."""
        logits, caches = self.forward(x, train=train, rng=rng)
        probs = softmax(logits)
        loss = -math.log(max(probs[target], 1e-300))
        dlogits = probs.copy()
        dlogits[target] -= 1.0
        grads: list[np.ndarray] = []
        dout = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, layer_grads = layer.backward(dout, cache)
            grads = layer_grads + grads
        if not grads:
            return loss, np.zeros(0)
        return loss, np.concatenate([g.ravel() for g in grads])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (isinstance(self.epochs, int) and self.epochs >= 0):
            raise ValueError(f"epochs must be a non-negative integer, got {self.epochs!r}")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def mean_flat_gradients(flats: Sequence[np.ndarray]) -> np.ndarray:
    """Sum in batch order, then divide once; the fixed accumulation order is
    what lets a noiseless private step reproduce this bit for bit."""
    acc = flats[0].copy()
    for f in flats[1:]:
        acc += f
    return acc / len(flats)


def run_sgd(
    net: Network,
    inputs: Sequence[np.ndarray],
    targets: Sequence[int],
    cfg: TrainConfig,
    rng: SeededRng,
    grad_combine: Optional[Callable[[list[np.ndarray]], np.ndarray]] = None,
) -> list[float]:
    """Mini-batch SGD with momentum over per-sample gradients.

    Each epoch reshuffles indices from the "shuffle" child stream; dropout
    masks come from the "dropout" stream in sample order.  ``grad_combine``
    turns the batch's per-sample gradient list into one averaged gradient
    (defaults to :func:`mean_flat_gradients`); private training passes a
    clipping-and-noising variant.  Returns mean training loss per epoch.
    """
    if grad_combine is None:
        grad_combine = mean_flat_gradients
    n = len(inputs)
    if n == 0:
        raise ValueError("training data must be non-empty")
    shuffle_rng = rng.spawn("shuffle")
    dropout_rng = rng.spawn("dropout")
    theta = net.flat_params()
    velocity = np.zeros_like(theta)
    history: list[float] = []
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            flats = []
            for i in batch:
                loss, g = net.loss_and_gradient(
                    inputs[i], targets[i], train=True, rng=dropout_rng
                )
                epoch_loss += loss
                flats.append(g)
            grad = grad_combine(flats)
            if cfg.weight_decay > 0:
                grad = grad + cfg.weight_decay * theta
            velocity = cfg.momentum * velocity + grad
            theta = theta - cfg.learning_rate * velocity
            net.set_flat_params(theta)
        history.append(epoch_loss / n)
    return history


def network_gradient_check(
    net: Network,
    x: np.ndarray,
    target: int,
    epsilon: float = 1e-5,
    sample_size: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks a seeded random subsample of at least ``sample_size`` parameters
    (all of them when the model is smaller).  Evaluation runs in inference
    mode so the loss is a deterministic function of the parameters.  The
    relative error denominator is floored at 1e-6 to keep jointly-vanishing
    gradient pairs from registering as disagreement.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    _, analytic = net.loss_and_gradient(x, target, train=False)
    theta = net.flat_params()
    n = theta.size
    pick_rng = SeededRng(seed)
    indices = pick_rng.permutation(n)[: min(sample_size, n)]
    worst = 0.0
    for idx in indices:
        saved = theta[idx]
        theta[idx] = saved + epsilon
        net.set_flat_params(theta)
        lo_plus, _ = net.forward(x, train=False)
        loss_plus = -math.log(max(softmax(lo_plus)[target], 1e-300))
        theta[idx] = saved - epsilon
        net.set_flat_params(theta)
        lo_minus, _ = net.forward(x, train=False)
        loss_minus = -math.log(max(softmax(lo_minus)[target], 1e-300))
        theta[idx] = saved
        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, rel)
    net.set_flat_params(theta)
    return worst
