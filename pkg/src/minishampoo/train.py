"""Desk-scale training substrate.

A bias-free multilayer perceptron with hand-written forward/backward passes,
two losses, synthetic and CSV data sources, and a deterministic training
loop that can route its optimizer step through the sharded simulator.

Every random draw comes from an explicit named stream keyed on the run seed,
so any step's batch can be regenerated in isolation: resuming from a
checkpoint at step t replays the exact run an uninterrupted job would have
produced.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from minishampoo.dist import build_workers, buffer_size, distributed_step
from minishampoo.optim import Shampoo, ShampooConfig, lr_at
from minishampoo.precond import ShapeMismatchError

__all__ = [
    "LabelOutOfRangeError",
    "Mlp",
    "ForwardCache",
    "forward",
    "backward",
    "loss",
    "softmax_cross_entropy",
    "mean_squared_error",
    "DataBundle",
    "make_synthetic_classes",
    "load_csv",
    "prepare_bundle",
    "batch_at",
    "stream_rng",
    "evaluate",
    "MetricsRow",
    "RunResult",
    "run_training",
]

# named rng lanes; distinct prefixes keep the streams independent
_LANE_INIT = 0
_LANE_DATA = 1
_LANE_SPLIT = 2
_LANE_BATCH = 3


class LabelOutOfRangeError(ValueError):
    """A class label fell outside [0, num_classes)."""


def stream_rng(seed: int, *lanes: int) -> np.random.Generator:
    """Deterministic generator for one named stream of a run."""
    return np.random.default_rng([int(seed), *[int(x) for x in lanes]])


# -- model -------------------------------------------------------------------


@dataclass
class Mlp:
    """Bias-free MLP; weights[i] maps width[i] -> width[i+1] features."""

    weights: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for w_prev, w_next in zip(self.weights, self.weights[1:]):
            if w_next.shape[1] != w_prev.shape[0]:
                raise ShapeMismatchError(
                    f"layer widths do not chain: {w_prev.shape} then {w_next.shape}"
                )

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @classmethod
    def initialize(cls, widths: list[int], activation: str, seed: int) -> "Mlp":
        """Per-layer uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
        rng = stream_rng(seed, _LANE_INIT)
        weights = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            s = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        return cls(weights, activation)


@dataclass
class ForwardCache:
    """Layer inputs a^(0)..a^(n-1) and hidden pre-activations z^(1)..z^(n-1)."""

    activations: list[np.ndarray]
    preactivations: list[np.ndarray]


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_deriv(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        # derivative at exactly 0 defined as 0
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def forward(model: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[1]:
        raise ShapeMismatchError(
            f"inputs {x.shape} do not match first layer {model.weights[0].shape}"
        )
    activations = [x]
    preactivations = []
    a = x
    for i, w in enumerate(model.weights):
        z = a @ w.T
        if i == len(model.weights) - 1:
            return z, ForwardCache(activations, preactivations)
        preactivations.append(z)
        a = _activate(z, model.activation)
        activations.append(a)
    raise AssertionError("unreachable: model has no layers")


def backward(
    model: Mlp, cache: ForwardCache, logits_grad: np.ndarray
) -> list[np.ndarray]:
    """Gradients for every layer; logits_grad carries any batch averaging.

    delta^(i) (a^(i-1))^T summed over the batch: the per-sample contribution
    to each layer's gradient is the rank-1 outer product of its error signal
    and its layer input.
    """
    logits_grad = np.asarray(logits_grad, dtype=np.float64)
    batch = cache.activations[0].shape[0]
    d_out = model.weights[-1].shape[0]
    if logits_grad.shape != (batch, d_out):
        raise ShapeMismatchError(
            f"logits gradient {logits_grad.shape} != ({batch}, {d_out})"
        )
    grads: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    delta = logits_grad
    for i in range(len(model.weights) - 1, -1, -1):
        grads[i] = delta.T @ cache.activations[i]
        if i > 0:
            delta = (delta @ model.weights[i]) * _activate_deriv(
                cache.preactivations[i - 1], model.activation
            )
    return grads


# -- losses ------------------------------------------------------------------


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its logits gradient (1/B folded in)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeMismatchError(f"labels {labels.shape} != ({batch},)")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= classes:
        raise LabelOutOfRangeError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(log_z - shifted[np.arange(batch), labels]))
    probs = np.exp(shifted - log_z[:, None])
    grad = probs
    grad[np.arange(batch), labels] -= 1.0
    return value, grad / batch


def mean_squared_error(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """0.5 * mean over the batch of the squared error norm."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ShapeMismatchError(f"targets {targets.shape} != {logits.shape}")
    diff = logits - targets
    batch = logits.shape[0]
    value = float(0.5 * np.sum(diff * diff) / batch)
    return value, diff / batch


def loss(kind: str, logits: np.ndarray, labels: np.ndarray):
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(logits, labels)
    if kind == "mse":
        return mean_squared_error(logits, labels)
    raise ValueError(f"unknown loss kind {kind!r}")


# -- data --------------------------------------------------------------------


@dataclass
class DataBundle:
    """Split, optionally normalized features with labels or targets."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int | None  # None for regression targets
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None


def make_synthetic_classes(
    seed: int, classes: int, dim: int, count: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian class clusters built to reward curvature correction.

    Samples pass through a fixed random mixing matrix whose singular values
    span three decades, so the feature covariance is ill conditioned along
    directions per-feature normalization cannot undo.  One label in ten is
    resampled uniformly, putting a hard floor under the reachable training
    cross-entropy; whether an optimizer attains that floor within a step
    budget is then a conditioning question, not a capacity one.
    """
    rng = stream_rng(seed, _LANE_DATA)
    means = rng.normal(0.0, 1.0, size=(classes, dim))
    scales = rng.uniform(0.5, 1.5, size=(classes, dim))
    labels = rng.integers(0, classes, size=count)
    clusters = means[labels] + rng.standard_normal((count, dim)) * scales[labels]
    left, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    right, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    mixing = (left * 10.0 ** np.linspace(-1.5, 1.5, dim)) @ right.T
    flip = rng.random(count) < 0.1
    labels = np.where(flip, rng.integers(0, classes, size=count), labels)
    return clusters @ mixing.T, labels


def load_csv(path: str, label_column: str) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV with a header row; the named column becomes the labels."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(cell) for cell in row] for row in reader if row]
    if label_column not in header:
        raise ValueError(f"no column named {label_column!r} in {header}")
    data = np.asarray(rows, dtype=np.float64)
    label_idx = header.index(label_column)
    mask = np.ones(len(header), dtype=bool)
    mask[label_idx] = False
    labels = data[:, label_idx]
    if np.all(labels == np.round(labels)):
        labels = labels.astype(np.int64)
    return data[:, mask], labels


def prepare_bundle(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    val_fraction: float = 0.2,
    normalize: bool = True,
) -> DataBundle:
    """Seeded shuffle, split, and per-feature standardization from train stats."""
    count = len(features)
    perm = stream_rng(seed, _LANE_SPLIT).permutation(count)
    n_val = int(round(count * val_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train_x, val_x = features[train_idx], features[val_idx]
    train_y, val_y = labels[train_idx], labels[val_idx]

    mean = std = None
    if normalize:
        mean = train_x.mean(axis=0)
        std = train_x.std(axis=0)
        std = np.where(std == 0.0, 1.0, std)
        train_x = (train_x - mean) / std
        val_x = (val_x - mean) / std

    classes = None
    if np.issubdtype(labels.dtype, np.integer):
        classes = int(labels.max()) + 1
    return DataBundle(train_x, train_y, val_x, val_y, classes, mean, std)


def batch_at(
    bundle: DataBundle, seed: int, step: int, batch_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """The mini-batch for one absolute step; a pure function of (seed, step)."""
    idx = stream_rng(seed, _LANE_BATCH, step).integers(
        0, len(bundle.train_x), size=batch_size
    )
    return bundle.train_x[idx], bundle.train_y[idx]


# -- training loop -----------------------------------------------------------


def evaluate(
    model: Mlp, x: np.ndarray, y: np.ndarray, loss_kind: str
) -> tuple[float, float]:
    """Loss and accuracy on a fixed set; accuracy is NaN for regression."""
    logits, _ = forward(model, x)
    value, _ = loss(loss_kind, logits, y)
    if loss_kind == "softmax_cross_entropy":
        accuracy = float(np.mean(np.argmax(logits, axis=1) == y))
    else:
        accuracy = float("nan")
    return value, accuracy


@dataclass
class MetricsRow:
    step: int
    loss: float
    val_loss: float
    accuracy: float
    lr: float
    step_ms: float
    gathered_bytes: int


@dataclass
class RunResult:
    metrics: list[MetricsRow]
    model: Mlp
    state_tree: dict
    guard_counts: dict = field(default_factory=dict)


def _merged_state_tree(workers) -> dict:
    """Union of group-0 workers' trees: each block appears exactly once."""
    group0 = [w for w in workers if w.group_index == 0]
    merged: dict = {"t": group0[0].optimizer.step_count, "params": {}}
    for w in group0:
        for i, param_tree in w.optimizer.state_tree()["params"].items():
            merged["params"].setdefault(i, {}).update(param_tree)
    return merged


def run_training(
    bundle: DataBundle,
    model: Mlp,
    config: ShampooConfig,
    steps: int,
    batch_size: int,
    seed: int,
    loss_kind: str = "softmax_cross_entropy",
    world_size: int = 1,
    group_size: int = 1,
    initial_state: dict | None = None,
) -> RunResult:
    """Deterministic mini-batch training, optionally sharded over workers.

    With initial_state the loop continues from that state's step counter and
    reproduces the uninterrupted run bitwise (timing column aside).
    """
    use_dist = world_size > 1
    if use_dist:
        plan, workers = build_workers(model.weights, config, world_size, group_size)
        if initial_state is not None:
            for w in workers:
                w.optimizer.load_state_tree(initial_state)
        # the model now aliases rank 0's replica
        model.weights = workers[0].params()
        optimizer = workers[0].optimizer
        bytes_per_step = buffer_size(plan) * plan.num_groups
    else:
        optimizer = Shampoo(model.weights, config)
        if initial_state is not None:
            optimizer.load_state_tree(initial_state)
        model.weights = optimizer.params()
        bytes_per_step = 0

    rows: list[MetricsRow] = []
    while optimizer.step_count < steps:
        t = optimizer.step_count
        started = time.perf_counter()
        xb, yb = batch_at(bundle, seed, t, batch_size)
        logits, cache = forward(model, xb)
        batch_loss, logits_grad = loss(loss_kind, logits, yb)
        grads = backward(model, cache, logits_grad)
        if use_dist:
            distributed_step(workers, grads)
        else:
            optimizer.step(grads)
        elapsed_ms = (time.perf_counter() - started) * 1e3
        val_loss, accuracy = evaluate(model, bundle.val_x, bundle.val_y, loss_kind)
        rows.append(
            MetricsRow(
                step=t,
                loss=batch_loss,
                val_loss=val_loss,
                accuracy=accuracy,
                lr=lr_at(config, t),
                step_ms=elapsed_ms,
                gathered_bytes=bytes_per_step,
            )
        )

    state_tree = _merged_state_tree(workers) if use_dist else optimizer.state_tree()
    guard = optimizer.guard_stats
    return RunResult(
        metrics=rows,
        model=model,
        state_tree=state_tree,
        guard_counts={
            "primary": guard.primary,
            "double_retry": guard.double_retry,
            "fallback_previous": guard.fallback_previous,
            "fallback_identity": guard.fallback_identity,
        },
    )
