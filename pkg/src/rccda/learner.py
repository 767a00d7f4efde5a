"""Differentiable models with exact losses and gradients.

Two loss modes share one interface:

* ``softmax``: a linear softmax classifier whose per-sample cross-entropy is
  clamped at ``clamp_b`` so the loss is bounded.
* ``quadratic``: ``0.5 * ||theta - c_t||^2`` for a time-indexed target path.
  It ignores the data, has smoothness constant 1 and zero gradient noise,
  which makes every constant in the convergence bound exact.

Parameters are flat float vectors. For the classifier the layout is the
row-major weight matrix (num_classes x feature_dim) followed by the biases.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .drift_env import Batch, DatasetState, sample_batch


class LossKind(str, enum.Enum):
    SOFTMAX = "softmax"
    QUADRATIC = "quadratic"


@dataclass(frozen=True, eq=False)
class LossSpec:
    kind: LossKind
    num_classes: int = 2
    clamp_b: float | None = None
    target_path: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.SOFTMAX:
            if self.num_classes < 2:
                raise ValueError("num_classes must be >= 2")
            if self.clamp_b is None:
                object.__setattr__(self, "clamp_b", 10.0 * math.log(self.num_classes))
        elif self.target_path is None:
            raise ValueError("quadratic loss needs a target_path")
        if self.clamp_b is not None and not self.clamp_b > 0:
            raise ValueError("clamp_b must be > 0")

    def target(self, t: int) -> np.ndarray:
        return self.target_path[t]


@dataclass(frozen=True)
class LearnerConfig:
    alpha: float
    steps_per_update: int = 5
    batch_size: int = 32
    l_smooth: float | None = None

    def __post_init__(self) -> None:
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if self.steps_per_update < 1 or self.batch_size < 1:
            raise ValueError("steps_per_update and batch_size must be positive")
        if self.l_smooth is not None and not self.alpha < 2.0 / self.l_smooth:
            raise ValueError(f"alpha={self.alpha} violates alpha < 2/L = {2.0 / self.l_smooth:.6g}")


def param_dim(spec: LossSpec, feature_dim: int) -> int:
    if spec.kind is LossKind.QUADRATIC:
        return spec.target_path.shape[1]
    return spec.num_classes * feature_dim + spec.num_classes


def init_params(spec: LossSpec, feature_dim: int, rng: np.random.Generator | None = None, scale: float = 0.0) -> np.ndarray:
    theta = np.zeros(param_dim(spec, feature_dim))
    if rng is not None and scale > 0:
        theta += scale * rng.standard_normal(theta.shape)
    return theta


def _unpack(theta: np.ndarray, k: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    return theta[: k * d].reshape(k, d), theta[k * d :]


def _check_batch(batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")


def _per_sample_ce(theta: np.ndarray, x: np.ndarray, y: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    W, b = _unpack(theta, k, x.shape[1])
    logits = x @ W.T + b
    m = logits.max(1, keepdims=True)
    z = np.exp(logits - m)
    s = z.sum(1, keepdims=True)
    lse = m[:, 0] + np.log(s[:, 0])
    ce = lse - logits[np.arange(len(y)), y]
    return ce, z / s


def per_sample_loss(params: np.ndarray, batch: Batch, spec: LossSpec) -> np.ndarray:
    _check_batch(batch)
    if spec.kind is LossKind.QUADRATIC:
        diff = params - spec.target(batch.t)
        return np.full(len(batch), 0.5 * float(diff @ diff))
    ce, _ = _per_sample_ce(params, batch.x, batch.y, spec.num_classes)
    return np.minimum(ce, spec.clamp_b)


def loss(params: np.ndarray, batch: Batch, spec: LossSpec) -> float:
    """Mean per-sample loss over a non-empty batch."""
    _check_batch(batch)
    if spec.kind is LossKind.QUADRATIC:
        diff = params - spec.target(batch.t)
        return 0.5 * float(diff @ diff)
    return float(per_sample_loss(params, batch, spec).mean())


def grad(params: np.ndarray, batch: Batch, spec: LossSpec) -> np.ndarray:
    """Analytic gradient of :func:`loss`.

    Samples whose cross-entropy reaches the clamp contribute zero.
    """
    _check_batch(batch)
    if spec.kind is LossKind.QUADRATIC:
        return params - spec.target(batch.t)
    k = spec.num_classes
    x, y = batch.x, batch.y
    ce, p = _per_sample_ce(params, x, y, k)
    p[np.arange(len(y)), y] -= 1.0
    p[ce >= spec.clamp_b] = 0.0
    p /= len(y)
    return np.concatenate([(p.T @ x).ravel(), p.sum(0)])


def full_gradient(params: np.ndarray, ds: DatasetState, spec: LossSpec) -> np.ndarray:
    """Gradient over the whole pool (the expectation over D_t)."""
    return grad(params, ds.pool_batch(), spec)


def full_loss(params: np.ndarray, ds: DatasetState, spec: LossSpec) -> float:
    return loss(params, ds.pool_batch(), spec)


def sgd_update(
    params: np.ndarray,
    ds: DatasetState,
    cfg: LearnerConfig,
    spec: LossSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``cfg.steps_per_update`` SGD steps on fresh pool batches.

    Returns the new parameters and the stochastic gradient of the first step,
    which is the gradient at the decision point.
    """
    size = min(cfg.batch_size, len(ds.pool))
    theta = params
    first = None
    for _ in range(cfg.steps_per_update):
        g = grad(theta, sample_batch(ds, size, rng), spec)
        if first is None:
            first = g
        theta = theta - cfg.alpha * g
    return theta, first


def predict(params: np.ndarray, x: np.ndarray, num_classes: int) -> np.ndarray:
    W, b = _unpack(params, num_classes, x.shape[1])
    return np.argmax(x @ W.T + b, axis=1)


def accuracy(params: np.ndarray, holdout: Batch, spec: LossSpec) -> float:
    """Fraction of argmax-correct predictions."""
    if spec.kind is not LossKind.SOFTMAX:
        raise ValueError("accuracy is only defined for the classifier")
    if len(holdout) == 0:
        raise ValueError("empty holdout")
    return float((predict(params, holdout.x, spec.num_classes) == holdout.y).mean())


def loss_and_accuracy(params: np.ndarray, batch: Batch, spec: LossSpec) -> tuple[float, float]:
    """Mean clamped loss and accuracy from a single forward pass (NaN accuracy for quadratic)."""
    _check_batch(batch)
    if spec.kind is LossKind.QUADRATIC:
        return loss(params, batch, spec), math.nan
    W, b = _unpack(params, spec.num_classes, batch.x.shape[1])
    logits = batch.x @ W.T + b
    m = logits.max(1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(1))
    ce = lse - logits[np.arange(len(batch.y)), batch.y]
    acc = float((logits.argmax(1) == batch.y).mean())
    return float(np.minimum(ce, spec.clamp_b).mean()), acc


def smoothness_constant(spec: LossSpec, data_bound: float | None = None) -> float:
    """Upper bound on the gradient Lipschitz constant.

    The softmax Hessian is (diag(p) - pp^T) kron [x;1][x;1]^T; the first
    factor has spectral norm <= 1/2, so L <= (R^2 + 1)/2 <= R^2/2 + 1.
    """
    if spec.kind is LossKind.QUADRATIC:
        return 1.0
    if data_bound is None or data_bound < 0:
        raise ValueError("softmax smoothness needs a nonnegative data_bound")
    return 0.5 * data_bound**2 + 1.0


def pretrain(
    params: np.ndarray,
    ds: DatasetState,
    cfg: LearnerConfig,
    spec: LossSpec,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Plain SGD on the initial pool, standing in for source-domain pretraining."""
    size = min(cfg.batch_size, len(ds.pool))
    theta = params
    for _ in range(steps):
        theta = theta - cfg.alpha * grad(theta, sample_batch(ds, size, rng), spec)
    return theta
