"""Regression models trained from scratch with numpy.

Two families share one parameter container: a linear model (a single
layer with one output) and a ReLU multilayer perceptron. Parameters are
layered weight matrices of shape ``(fan_in, fan_out)`` plus bias vectors;
the flat view concatenates, per layer, the row-major weights followed by
the biases. Gradients and federated deltas use the same flat layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import (
    EmptyShard,
    LengthMismatch,
    NonFinite,
    ShapeMismatch,
    SingularMatrix,
    ZeroVariance,
)

PIVOT_RTOL = 1e-10


class LossKind(str, Enum):
    MAE = "mae"
    MSE = "mse"


@dataclass(frozen=True, eq=False)
class ModelParams:
    kind: str
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i} input {w.shape[0]} != previous output")
        if self.weights[-1].shape[1] != 1:
            raise ShapeMismatch("the output layer must have width 1")
        if self.kind == "linear" and len(self.weights) != 1:
            raise ShapeMismatch("a linear model has exactly one layer")

    @classmethod
    def linear(cls, coef, intercept: float) -> ModelParams:
        coef = np.asarray(coef, dtype=float).reshape(-1, 1)
        return cls("linear", (coef,), (np.array([float(intercept)]),))

    @property
    def coef(self) -> np.ndarray:
        return self.weights[0][:, 0]

    @property
    def intercept(self) -> float:
        return float(self.biases[0][0])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def with_flat(self, vec) -> ModelParams:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ShapeMismatch(f"flat vector of length {vec.size}, expected {self.n_params}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return ModelParams(self.kind, tuple(weights), tuple(biases), self.seed)

    def copy(self) -> ModelParams:
        return ModelParams(
            self.kind,
            tuple(w.copy() for w in self.weights),
            tuple(b.copy() for b in self.biases),
            self.seed,
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "shapes": [list(s) for s in self.shapes],
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> ModelParams:
        d = json.loads(text)
        weights = tuple(
            np.array(w, dtype=float).reshape(shape) for w, shape in zip(d["weights"], d["shapes"])
        )
        biases = tuple(np.array(b, dtype=float) for b in d["biases"])
        return cls(d["kind"], weights, biases, d.get("seed"))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 1
    batch_size: int | None = 32  # None: one batch per pass
    loss: LossKind = LossKind.MAE
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        object.__setattr__(self, "loss", LossKind(self.loss))


@dataclass(frozen=True)
class Metrics:
    r_squared: float
    rmse: float
    mae: float
    mse: float


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _forward(m: ModelParams, X: np.ndarray):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != m.input_dim:
        raise ShapeMismatch(f"input shape {X.shape}, model expects {m.input_dim} features")
    acts, pre = [X], []
    h = X
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        # einsum keeps each row's result independent of batch size; BLAS does not
        z = np.einsum("ij,jk->ik", h, w) + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return h[:, 0], acts, pre


def predict(m: ModelParams, X) -> np.ndarray:
    return _forward(m, X)[0]


def loss_value(pred, target, loss: LossKind | str) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.size == 0:
        raise LengthMismatch(f"prediction {pred.shape} vs target {target.shape}")
    r = pred - target
    if LossKind(loss) is LossKind.MAE:
        return float(np.mean(np.abs(r)))
    return float(np.mean(r * r))


def gradient(m: ModelParams, X, y, loss: LossKind | str) -> np.ndarray:
    """Flat gradient of the mean per-sample loss.

    The MAE subgradient uses sign(residual) with sign(0) = 0; ReLU units
    with zero pre-activation pass no gradient.
    """
    y = np.asarray(y, dtype=float)
    pred, acts, pre = _forward(m, X)
    if y.shape != pred.shape:
        raise ShapeMismatch(f"target {y.shape} vs {pred.shape[0]} rows")
    n = len(y)
    r = pred - y
    dout = (np.sign(r) if LossKind(loss) is LossKind.MAE else 2.0 * r) / n
    delta = dout[:, None]
    grads = [None] * len(m.weights)
    for i in range(len(m.weights) - 1, -1, -1):
        if i != len(m.weights) - 1:
            delta = delta * (pre[i] > 0)
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        delta = delta @ m.weights[i].T
    return np.concatenate([part for gw, gb in grads for part in (gw.ravel(), gb)])


def local_step(m: ModelParams, X, y, cfg: TrainConfig) -> np.ndarray:
    """Run ``cfg.epochs`` passes of sequential mini-batch SGD and return the
    parameter displacement (final minus initial flat parameters).

    Batches are taken in row order. With one epoch and a batch covering the
    whole shard this is exactly ``-learning_rate * gradient``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n == 0:
        raise EmptyShard("local_step on a shard with no rows")
    start = m.flat()
    disp = np.zeros_like(start)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    current = m
    for _ in range(cfg.epochs):
        for lo in range(0, n, bs):
            g = gradient(current, X[lo:lo + bs], y[lo:lo + bs], cfg.loss)
            disp = disp - cfg.learning_rate * g
            current = m.with_flat(start + disp)
    return disp


def train_sgd(m: ModelParams, X, y, cfg: TrainConfig, epochs: int) -> tuple[ModelParams, list[Metrics]]:
    """Centralized SGD on pooled data; one :class:`Metrics` per epoch."""
    history = []
    for _ in range(epochs):
        m = m.with_flat(m.flat() + local_step(m, X, y, cfg))
        if not m.is_finite():
            raise NonFinite("training diverged")
        history.append(evaluate(m, X, y))
    return m, history


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def mlp_init(d_in: int, h1: int = 10, h2: int = 10, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, layers d_in -> h1 -> h2 -> 1."""
    if min(d_in, h1, h2) < 1:
        raise ValueError("layer sizes must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = [d_in, h1, h2, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams("mlp", tuple(weights), tuple(biases), seed)


def fit_linear_ols(X, y) -> ModelParams:
    """Least-squares fit with an explicit intercept, via Householder QR.

    Raises :class:`SingularMatrix` when a diagonal entry of R falls below
    ``1e-10`` times the largest one, i.e. when the design (with its
    intercept column) is numerically rank deficient.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ShapeMismatch(f"X {X.shape} vs y {y.shape}")
    n, d = X.shape
    if n <= d:
        raise SingularMatrix(f"{n} rows cannot determine {d} coefficients plus intercept")
    A = np.column_stack([X, np.ones(n)])
    q, r = np.linalg.qr(A)
    diag = np.abs(np.diag(r))
    if diag.min() < PIVOT_RTOL * diag.max():
        raise SingularMatrix(f"rank-deficient design: pivot ratio {diag.min() / diag.max():.3e}")
    beta = np.linalg.solve(r, q.T @ y)
    return ModelParams.linear(beta[:-1], beta[-1])


def mean_predictor(y, d_in: int) -> ModelParams:
    """Constant model predicting the mean of ``y`` for any ``d_in`` inputs."""
    return ModelParams.linear(np.zeros(d_in), float(np.mean(np.asarray(y, dtype=float))))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def metrics_from_predictions(pred, y) -> Metrics:
    pred, y = np.asarray(pred, dtype=float), np.asarray(y, dtype=float)
    if pred.shape != y.shape or y.size == 0:
        raise LengthMismatch(f"prediction {pred.shape} vs target {y.shape}")
    r = y - pred
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("R^2 is undefined for a constant target")
    mse = float(np.mean(r * r))
    return Metrics(
        r_squared=1.0 - float(np.sum(r * r)) / ss_tot,
        rmse=math.sqrt(mse),
        mae=float(np.mean(np.abs(r))),
        mse=mse,
    )


def evaluate(m: ModelParams, X, y) -> Metrics:
    return metrics_from_predictions(predict(m, X), y)


def param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
