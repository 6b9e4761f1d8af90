"""Desk-scale differentiable models on flat parameter vectors.

Three kinds are supported:

* ``quadratic`` -- client loss ``0.5 (w-b)^T A (w-b)`` on a :class:`QuadraticShard`;
* ``logistic``  -- multinomial (softmax) regression, params ``[W (K x D), b (K)]``;
* ``mlp``       -- one tanh hidden layer, params ``[W1 (H x D), b1 (H), W2 (K x H), b2 (K)]``.

Gradients are written out by hand; the test-suite checks them against central
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from .datasets import Dataset, QuadraticProblem, QuadraticShard
from .errors import ConfigError, EstimationError, MetricError, NumericDomainError, ShapeError
from .numerics import check_finite, l2_norm

KINDS = ("quadratic", "logistic", "mlp")
Batch = Union[Dataset, QuadraticShard]


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 10
    hidden_units: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.kind != "quadratic" and self.num_classes < 2:
            raise ConfigError("classifiers need at least two classes")
        if self.kind == "mlp" and self.hidden_units < 1:
            raise ConfigError("hidden_units must be positive")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "quadratic"

    @property
    def num_params(self) -> int:
        d, k, h = self.input_dim, self.num_classes, self.hidden_units
        if self.kind == "quadratic":
            return d
        if self.kind == "logistic":
            return k * d + k
        return h * d + h + k * h + k


@dataclass
class GradResult:
    gradient: np.ndarray
    loss: float
    batch_size: int


def _unpack_logistic(spec: ModelSpec, params: np.ndarray):
    k, d = spec.num_classes, spec.input_dim
    W = params[: k * d].reshape(k, d)
    b = params[k * d:]
    return W, b


def _unpack_mlp(spec: ModelSpec, params: np.ndarray):
    d, h, k = spec.input_dim, spec.hidden_units, spec.num_classes
    i = 0
    W1 = params[i:i + h * d].reshape(h, d)
    i += h * d
    b1 = params[i:i + h]
    i += h
    W2 = params[i:i + k * h].reshape(k, h)
    i += k * h
    b2 = params[i:i + k]
    return W1, b1, W2, b2


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    if spec.kind == "quadratic":
        bound = 1.0 / math.sqrt(spec.input_dim)
        return rng.uniform(-bound, bound, spec.input_dim)
    if spec.kind == "logistic":
        bound = 1.0 / math.sqrt(spec.input_dim)
        return rng.uniform(-bound, bound, spec.num_params)
    d, h, k = spec.input_dim, spec.hidden_units, spec.num_classes
    b_in, b_hid = 1.0 / math.sqrt(d), 1.0 / math.sqrt(h)
    return np.concatenate([
        rng.uniform(-b_in, b_in, h * d + h),
        rng.uniform(-b_hid, b_hid, k * h + k),
    ])


def _check(spec: ModelSpec, params: np.ndarray, batch: Batch) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.num_params,):
        raise ShapeError(f"{spec.kind} model expects {spec.num_params} params, got shape {params.shape}")
    if len(batch) == 0:
        raise ShapeError("empty batch")
    if spec.kind == "quadratic":
        if not isinstance(batch, QuadraticShard):
            raise ShapeError("quadratic model needs a QuadraticShard batch")
        if batch.dim != spec.input_dim:
            raise ShapeError(f"quadratic shard has dim {batch.dim}, model {spec.input_dim}")
    else:
        if not isinstance(batch, Dataset):
            raise ShapeError("classifier needs a Dataset batch")
        if batch.dim != spec.input_dim:
            raise ShapeError(f"batch has {batch.dim} features, model expects {spec.input_dim}")
        if batch.y.max() >= spec.num_classes:
            raise ShapeError("label outside model class range")
    return params


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    m = Z.max(axis=1, keepdims=True)
    shifted = Z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, params, X) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if spec.kind == "logistic":
        W, b = _unpack_logistic(spec, params)
        return X @ W.T + b
    if spec.kind == "mlp":
        W1, b1, W2, b2 = _unpack_mlp(spec, params)
        return np.tanh(X @ W1.T + b1) @ W2.T + b2
    raise MetricError("quadratic models have no logits")


def predict_proba(spec: ModelSpec, params, X) -> np.ndarray:
    return np.exp(_log_softmax(logits(spec, params, X)))


def _value_and_grad(spec: ModelSpec, params: np.ndarray, batch: Batch, need_grad: bool):
    if spec.kind == "quadratic":
        d = params - batch.b
        Ad = batch.A @ d
        return 0.5 * float(d @ Ad), (Ad if need_grad else None)

    X, y = batch.X, batch.y
    n = len(y)
    rows = np.arange(n)
    if spec.kind == "logistic":
        W, b = _unpack_logistic(spec, params)
        logp = _log_softmax(X @ W.T + b)
        value = -float(logp[rows, y].mean())
        if not need_grad:
            return value, None
        dZ = np.exp(logp)
        dZ[rows, y] -= 1.0
        dZ /= n
        return value, np.concatenate([(dZ.T @ X).ravel(), dZ.sum(axis=0)])

    W1, b1, W2, b2 = _unpack_mlp(spec, params)
    H = np.tanh(X @ W1.T + b1)
    logp = _log_softmax(H @ W2.T + b2)
    value = -float(logp[rows, y].mean())
    if not need_grad:
        return value, None
    dZ = np.exp(logp)
    dZ[rows, y] -= 1.0
    dZ /= n
    dA = (dZ @ W2) * (1.0 - H * H)
    return value, np.concatenate([
        (dA.T @ X).ravel(), dA.sum(axis=0), (dZ.T @ H).ravel(), dZ.sum(axis=0),
    ])


def loss(spec: ModelSpec, params, batch: Batch) -> float:
    """Mean per-example loss (cross-entropy, or the quadratic form)."""
    params = _check(spec, params, batch)
    value, _ = _value_and_grad(spec, params, batch, need_grad=False)
    return value


def grad(spec: ModelSpec, params, batch: Batch) -> GradResult:
    params = _check(spec, params, batch)
    value, g = _value_and_grad(spec, params, batch, need_grad=True)
    check_finite(g, "gradient")
    if not math.isfinite(value):
        raise NumericDomainError("non-finite loss")
    return GradResult(g, value, len(batch))


def predict(spec: ModelSpec, params, X) -> np.ndarray:
    """Arg-max class; ``np.argmax`` breaks ties toward the lowest index."""
    return np.argmax(logits(spec, params, X), axis=1)


def accuracy(spec: ModelSpec, params, dataset: Dataset) -> float:
    if not spec.is_classifier:
        raise MetricError("accuracy is undefined for the quadratic (regression) kind")
    if len(dataset) == 0:
        raise MetricError("accuracy of an empty dataset")
    return float(np.mean(predict(spec, params, dataset.X) == dataset.y))


def evaluate(spec: ModelSpec, params, test) -> Tuple[float, float]:
    """``(test_loss, test_accuracy)``.

    For quadratic problems the loss is the excess loss over the optimum of the
    federation's mean objective and the accuracy is ``nan``.
    """
    if isinstance(test, QuadraticProblem):
        return test.excess_loss(params), float("nan")
    return loss(spec, params, test), accuracy(spec, params, test)


def grad_norm_bound_estimate(spec: ModelSpec, params_trace: Iterable, shards: Sequence[Batch],
                             safety: float = 1.1) -> float:
    """Empirical gradient-norm bound: ``safety * max ||grad L_c(w)||`` over the
    visited parameters and every client shard."""
    trace = list(params_trace)
    if not trace:
        raise EstimationError("cannot estimate G from an empty parameter trace")
    if not shards:
        raise EstimationError("cannot estimate G without client shards")
    worst = 0.0
    for w in trace:
        for shard in shards:
            worst = max(worst, l2_norm(grad(spec, w, shard).gradient))
    return safety * worst
