"""Federated client simulator: fully connected ReLU networks and their gradients.

Inputs are stored as columns, so a batch ``X`` has shape ``(n, b)`` and the
pre-activations of a layer with weights ``W`` (``m x n``) are ``W @ X + bias``.
Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    has_relu: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError(f"layer dims must be positive, got {self.input_dim}x{self.output_dim}")


def mlp_specs(input_dim: int, width: int, depth: int, num_classes: int) -> list[LayerSpec]:
    """Specs for ``depth`` linear layers; all but the last are followed by ReLU."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    dims = [input_dim] + [width] * (depth - 1) + [num_classes]
    return [
        LayerSpec(dims[k], dims[k + 1], has_relu=k < depth - 1) for k in range(depth)
    ]


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    relu: list[bool]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.relu)
        )


@dataclass
class Batch:
    X: np.ndarray
    labels: np.ndarray
    data_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError("X must be an n x b matrix")
        if self.labels.shape != (self.X.shape[1],):
            raise ValueError(
                f"need one label per column: {self.labels.shape[0]} labels, {self.X.shape[1]} columns"
            )
        if not np.all(np.isfinite(self.X)):
            raise ValueError("batch contains non-finite values")

    @property
    def size(self) -> int:
        return self.X.shape[1]


@dataclass
class ForwardTrace:
    Z: list[np.ndarray]
    Y: list[np.ndarray]
    logits: np.ndarray
    loss: float


@dataclass
class GradientCapture:
    """Per-layer weight/bias gradients as seen by the server.

    ``dZ`` holds the pre-activation gradients when they are known (simulator
    ground truth); an attacker never reads them.
    """

    dW: list[np.ndarray]
    db: list[np.ndarray]
    dZ: Optional[list[np.ndarray]] = None
    per_example: Optional[list["GradientCapture"]] = field(default=None, repr=False)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.dW, self.db) for a in pair])

    def scaled(self, factor: float) -> "GradientCapture":
        return GradientCapture(
            [factor * w for w in self.dW],
            [factor * b for b in self.db],
            None if self.dZ is None else [factor * z for z in self.dZ],
        )


@dataclass(frozen=True)
class DpConfig:
    clip_norm: Optional[float] = None
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class FedAvgConfig:
    epochs: int = 1
    learning_rate: float = 0.01
    mini_batch_size: Optional[int] = None
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.mini_batch_size is not None and self.mini_batch_size < 1:
            raise ValueError("mini_batch_size must be >= 1")


def init_network(specs: Sequence[LayerSpec], seed: int) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one layer")
    for k in range(len(specs) - 1):
        if specs[k].output_dim != specs[k + 1].input_dim:
            raise ValueError(
                f"layer {k} outputs {specs[k].output_dim} but layer {k + 1} expects {specs[k + 1].input_dim}"
            )
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        bound = 1.0 / math.sqrt(spec.input_dim)
        weights.append(rng.uniform(-bound, bound, size=(spec.output_dim, spec.input_dim)))
        biases.append(rng.uniform(-bound, bound, size=spec.output_dim))
    return NetworkParams(weights, biases, [s.has_relu for s in specs])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    b = logits.shape[1]
    return float(-log_probs[labels, np.arange(b)].mean())


def forward(params: NetworkParams, X: np.ndarray, labels: Sequence[int]) -> ForwardTrace:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != params.input_dim:
        raise ValueError(f"expected inputs with {params.input_dim} rows, got shape {X.shape}")
    if labels.shape != (X.shape[1],):
        raise ValueError("need one label per input column")
    if labels.size and (labels.min() < 0 or labels.max() >= params.num_classes):
        raise ValueError("label out of range")
    Zs, Ys = [], []
    act = X
    for W, bias, relu in zip(params.weights, params.biases, params.relu):
        Z = W @ act + bias[:, None]
        Y = np.maximum(Z, 0.0) if relu else Z
        Zs.append(Z)
        Ys.append(Y)
        act = Y
    return ForwardTrace(Zs, Ys, act, _cross_entropy(act, labels))


def backward(
    params: NetworkParams, trace: ForwardTrace, X: np.ndarray, labels: Sequence[int]
) -> GradientCapture:
    """Backprop of the mean cross-entropy; ``dW_l = dZ_l @ input_l.T``."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = X.shape[1]
    onehot = np.zeros_like(trace.logits)
    onehot[labels, np.arange(b)] = 1.0
    grad_out = (_softmax(trace.logits) - onehot) / b

    depth = params.depth
    dW: list = [None] * depth
    db: list = [None] * depth
    dZ: list = [None] * depth
    for k in reversed(range(depth)):
        if params.relu[k]:
            dz = grad_out * (trace.Z[k] > 0)
        else:
            dz = grad_out
        inp = X if k == 0 else trace.Y[k - 1]
        dZ[k] = dz
        dW[k] = dz @ inp.T
        db[k] = dz.sum(axis=1)
        if k > 0:
            grad_out = params.weights[k].T @ dz
    return GradientCapture(dW, db, dZ)


def gradients(params: NetworkParams, X: np.ndarray, labels: Sequence[int]) -> GradientCapture:
    trace = forward(params, X, labels)
    return backward(params, trace, X, labels)


def per_example_gradients(
    params: NetworkParams, X: np.ndarray, labels: Sequence[int]
) -> list[GradientCapture]:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    return [gradients(params, X[:, i : i + 1], labels[i : i + 1]) for i in range(X.shape[1])]


def finite_diff_grad(
    params: NetworkParams, X: np.ndarray, labels: Sequence[int], step: float = 1e-6
) -> GradientCapture:
    """Central-difference estimate of every weight and bias gradient."""
    if not step > 0:
        raise ValueError("step must be positive")
    work = params.copy()

    def loss() -> float:
        return forward(work, X, labels).loss

    def estimate(arr: np.ndarray) -> np.ndarray:
        out = np.empty_like(arr)
        flat, gflat = arr.reshape(-1), out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        return out

    dW = [estimate(w) for w in work.weights]
    db = [estimate(b) for b in work.biases]
    return GradientCapture(dW, db)


def clip_and_noise(per_example: Sequence[GradientCapture], dp: DpConfig) -> GradientCapture:
    """DPSGD aggregation: per-example clipping on the composite vector, mean, then noise.

    The same factor ``min(1, C / ||g_i||)`` multiplies every layer of example i.
    """
    if not per_example:
        raise ValueError("clipping requires per-example gradient captures")
    factors = []
    for g in per_example:
        if dp.clip_norm is None:
            factors.append(1.0)
        else:
            norm = float(np.linalg.norm(g.flat()))
            factors.append(1.0 if norm == 0 else min(1.0, dp.clip_norm / norm))
    b = len(per_example)
    n_layers = len(per_example[0].dW)
    dW = [sum(c * g.dW[k] for c, g in zip(factors, per_example)) / b for k in range(n_layers)]
    db = [sum(c * g.db[k] for c, g in zip(factors, per_example)) / b for k in range(n_layers)]
    dZ = None
    if all(g.dZ is not None for g in per_example):
        dZ = [
            np.concatenate([c * g.dZ[k] for c, g in zip(factors, per_example)], axis=1) / b
            for k in range(n_layers)
        ]
    if dp.noise_sigma > 0:
        rng = np.random.default_rng(dp.noise_seed)
        dW = [w + rng.normal(0.0, dp.noise_sigma, size=w.shape) for w in dW]
        db = [v + rng.normal(0.0, dp.noise_sigma, size=v.shape) for v in db]
    out = GradientCapture(dW, db, dZ)
    out.per_example = list(per_example)
    return out


def fedavg_delta(params0: NetworkParams, batch: Batch, cfg: FedAvgConfig) -> GradientCapture:
    """Local FedAvg training; returns ``(theta_0 - theta_E) / lr`` per layer.

    That is the sum of all local step gradients. ``dZ`` holds the matching sum
    of pre-activation gradients with zero columns for examples absent from a step.
    """
    b = batch.size
    b_mini = cfg.mini_batch_size or b
    if b_mini > b:
        raise ValueError(f"mini_batch_size {b_mini} exceeds batch size {b}")
    rng = np.random.default_rng(cfg.shuffle_seed)
    work = params0.copy()
    dZ_sum = [np.zeros((w.shape[0], b)) for w in work.weights]
    for _ in range(cfg.epochs):
        order = rng.permutation(b) if b_mini < b else np.arange(b)
        for start in range(0, b, b_mini):
            idx = order[start : start + b_mini]
            g = gradients(work, batch.X[:, idx], batch.labels[idx])
            for k in range(work.depth):
                work.weights[k] -= cfg.learning_rate * g.dW[k]
                work.biases[k] -= cfg.learning_rate * g.db[k]
                dZ_sum[k][:, idx] += g.dZ[k]
    lr = cfg.learning_rate
    dW = [(w0 - w) / lr for w0, w in zip(params0.weights, work.weights)]
    db = [(b0 - bb) / lr for b0, bb in zip(params0.biases, work.biases)]
    return GradientCapture(dW, db, dZ_sum)
