"""Update policies: RCCDA and four budget-aware baselines.

The virtual queue ``Q(t+1) = max(0, Q(t) + cost(t) * pi(t) - avg_cost)``
accumulates spending above the permitted average. RCCDA updates when the
loss-based urgency on the left of its threshold test outweighs the queue-
weighted cost on the right.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# token-bucket comparisons tolerate accumulated rounding of repeated accrual
_BUDGET_EPS = 1e-9


@dataclass(frozen=True)
class VirtualQueue:
    q: float = 0.0

    def __post_init__(self) -> None:
        if not self.q >= 0:
            raise ValueError("queue length must be >= 0")


def queue_step(q: VirtualQueue, lam_t: float, decision: int, lam_bar: float) -> VirtualQueue:
    if lam_t < 0 or lam_bar < 0:
        raise ValueError("costs must be nonnegative")
    if decision not in (0, 1):
        raise ValueError("decision must be 0 or 1")
    return VirtualQueue(max(0.0, q.q + lam_t * decision - lam_bar))


def lyapunov_drift(q_now: VirtualQueue | float, q_next: VirtualQueue | float) -> float:
    a = q_now.q if isinstance(q_now, VirtualQueue) else q_now
    b = q_next.q if isinstance(q_next, VirtualQueue) else q_next
    return 0.5 * (b * b - a * a)


# ---------------------------------------------------------------------------
# histories and gradient-norm estimators


@dataclass
class Histories:
    """Loss, gradient and decision histories kept by the decision loop."""

    losses: list[float] = field(default_factory=list)
    running_min_loss: float = math.inf
    gradients: list[tuple[int, float]] = field(default_factory=list)
    decisions: list[int] = field(default_factory=list)
    # (|f_t - f_{t-1}|, ||grad||) at update times t >= 1
    fit_pairs: list[tuple[float, float]] = field(default_factory=list)

    def record_loss(self, f_t: float) -> None:
        self.losses.append(f_t)
        if f_t < self.running_min_loss:
            self.running_min_loss = f_t

    def record_update(self, t: int, grad_norm: float) -> None:
        self.gradients.append((t, grad_norm))
        if t >= 1 and len(self.losses) > t:
            self.fit_pairs.append((abs(self.losses[t] - self.losses[t - 1]), grad_norm))

    def record_decision(self, decision: int) -> None:
        self.decisions.append(decision)


class EstimatorKind(str, enum.Enum):
    LAST_GRADIENT = "last_gradient"
    WEIGHTED_PAST_K = "weighted_past_k"
    LOSS_DIFF_CONSTANT = "loss_diff_constant"
    LOSS_DIFF_LEAST_SQUARES = "loss_diff_least_squares"


@dataclass(frozen=True)
class EstimatorSpec:
    kind: EstimatorKind = EstimatorKind.LOSS_DIFF_CONSTANT
    k_d: float = 1.0
    k_window: int = 3
    weights: tuple[float, ...] | None = None
    min_fit_points: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if self.k_window < 1 or self.min_fit_points < 2:
            raise ValueError("k_window must be >= 1 and min_fit_points >= 2")
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if len(w) != self.k_window or any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ValueError("weights must be k_window nonnegative values summing to 1")
            object.__setattr__(self, "weights", w)

    def window_weights(self) -> tuple[float, ...]:
        if self.weights is None:
            return (1.0 / self.k_window,) * self.k_window
        return self.weights


def fit_loss_diff_model(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Ordinary least squares ``y ~ a * x + b`` in centred closed form."""
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    xc, yc = x - x.mean(), y - y.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("degenerate fit: all x values are equal")
    a = float(xc @ yc) / sxx
    return a, float(y.mean() - a * x.mean())


def _loss_diff(h: Histories, t: int) -> float:
    return h.losses[t] - h.losses[t - 1]


def estimate_grad_norm(spec: EstimatorSpec, h: Histories, t: int) -> float:
    """Estimate of the current full-gradient norm from the histories.

    Gradient-based estimators fall back to ``k_d * max(0, f_t - f_{t-1})``
    until a gradient has been recorded; the least-squares model does the
    same until ``min_fit_points`` pairs with distinct x exist.
    """
    if t < 1:
        raise ValueError("the estimators need t >= 1")
    if len(h.losses) <= t:
        raise ValueError(f"loss history has no entry for step {t}")
    fallback = max(0.0, spec.k_d * _loss_diff(h, t))
    kind = spec.kind
    if kind is EstimatorKind.LOSS_DIFF_CONSTANT:
        return fallback
    if kind is EstimatorKind.LAST_GRADIENT:
        return h.gradients[-1][1] if h.gradients else fallback
    if kind is EstimatorKind.WEIGHTED_PAST_K:
        if not h.gradients:
            return fallback
        recent = [g for _, g in reversed(h.gradients[-spec.k_window :])]
        w = np.asarray(spec.window_weights()[: len(recent)])
        return float(w @ np.asarray(recent) / w.sum())
    # least squares
    if len(h.fit_pairs) < spec.min_fit_points:
        return fallback
    xs, ys = zip(*h.fit_pairs)
    try:
        a, b = fit_loss_diff_model(xs, ys)
    except ValueError:
        return fallback
    return max(0.0, a * abs(_loss_diff(h, t)) + b)


# ---------------------------------------------------------------------------
# RCCDA


class ThresholdForm(str, enum.Enum):
    DERIVATION = "derivation"
    ALGORITHM_LINE = "algorithm_line"


CostFn = Callable[[int], float]


def constant_cost(value: float) -> CostFn:
    return lambda t: value


def series_cost(values: Sequence[float]) -> CostFn:
    vals = tuple(float(v) for v in values)
    return lambda t: vals[t]


@dataclass(frozen=True)
class PolicyConfig:
    v_weight: float
    eta: float
    l_smooth: float
    cost_fn: CostFn
    avg_cost: float
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    threshold_form: ThresholdForm = ThresholdForm.DERIVATION

    def __post_init__(self) -> None:
        object.__setattr__(self, "threshold_form", ThresholdForm(self.threshold_form))
        if self.v_weight < 0 or self.eta <= 0 or self.l_smooth <= 0 or self.avg_cost <= 0:
            raise ValueError("v_weight must be >= 0; eta, l_smooth and avg_cost must be > 0")

    def cost(self, t: int) -> float:
        c = self.cost_fn(t)
        if not c > self.avg_cost:
            raise ValueError(f"cost({t})={c} must exceed avg_cost={self.avg_cost}")
        return c


def rccda_threshold(
    f_t: float, h: Histories, q: VirtualQueue, cfg: PolicyConfig, t: int, ghat: float
) -> tuple[float, float]:
    """Both sides of the update test; update when ``lhs >= rhs``."""
    lam, lam_bar = cfg.cost(t), cfg.avg_cost
    v = cfg.v_weight
    lhs = v * (f_t - h.running_min_loss) + cfg.eta * cfg.l_smooth * v * ghat
    if cfg.threshold_form is ThresholdForm.DERIVATION:
        rhs = lam * q.q + 0.5 * (lam * lam - 2.0 * lam_bar * lam)
    else:
        rhs = q.q + 0.5 * ((lam_bar / lam) ** 2 - ((lam - lam_bar) / lam) ** 2)
    return lhs, rhs


def rccda_ghat(h: Histories, cfg: PolicyConfig, t: int) -> float:
    # no previous loss exists at t = 0
    return 0.0 if t == 0 else estimate_grad_norm(cfg.estimator, h, t)


def rccda_decide(
    f_t: float, h: Histories, q: VirtualQueue, cfg: PolicyConfig, t: int, ghat: float | None = None
) -> int:
    """RCCDA decision at step ``t``; ``f_t`` must already be in ``h.losses``."""
    if ghat is None:
        ghat = rccda_ghat(h, cfg, t)
    lhs, rhs = rccda_threshold(f_t, h, q, cfg, t, ghat)
    return int(lhs >= rhs)


# ---------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class BaselineConfig:
    budget_rate: float
    consec_n: int = 2
    window_len: int = 10
    eps: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 <= self.budget_rate <= 1.0:
            raise ValueError("budget_rate must lie in [0, 1]")
        if self.consec_n < 1 or self.window_len < 1 or self.eps <= 0:
            raise ValueError("consec_n, window_len and eps must be positive")

    @property
    def period(self) -> int:
        if self.budget_rate <= 0:
            raise ValueError("periodic policy needs budget_rate > 0")
        return max(1, math.ceil(1.0 / self.budget_rate - _BUDGET_EPS))


@dataclass
class TokenBudget:
    """Accrues ``accrual`` per step up to ``cap``; updates pay their cost."""

    accrual: float
    cap: float
    tokens: float = 0.0

    def accrue(self) -> None:
        self.tokens = min(self.cap, self.tokens + self.accrual)

    def can_pay(self, cost: float) -> bool:
        return self.tokens + _BUDGET_EPS >= cost

    def pay(self, cost: float) -> None:
        if not self.can_pay(cost):
            raise ValueError("insufficient budget")
        self.tokens = max(0.0, self.tokens - cost)


def uniform_decide(rng: np.random.Generator, b: BaselineConfig) -> int:
    return int(rng.random() < b.budget_rate)


def periodic_decide(t: int, b: BaselineConfig) -> int:
    if t < 0:
        raise ValueError("t must be >= 0")
    return int(t % b.period == 0)


def budget_increase_decide(h: Histories, budget: TokenBudget, b: BaselineConfig, t: int, cost: float) -> int:
    """Update after ``consec_n`` strict loss increases when the budget allows."""
    losses = h.losses[: t + 1]
    if len(losses) < b.consec_n + 1:
        return 0
    tail = losses[-(b.consec_n + 1) :]
    rising = all(nxt > prev for prev, nxt in zip(tail, tail[1:]))
    return int(rising and budget.can_pay(cost))


def budget_threshold_decide(h: Histories, budget: TokenBudget, b: BaselineConfig, t: int, cost: float) -> int:
    """Update when ``f_t >= (1 + eps) * max(window)`` and the budget allows."""
    if t < 1 or len(h.losses) <= t:
        return 0
    window = h.losses[max(0, t - b.window_len) : t]
    return int(h.losses[t] >= (1.0 + b.eps) * max(window) and budget.can_pay(cost))


# ---------------------------------------------------------------------------
# uniform policy objects for the simulation loop


class Policy:
    """Common decision interface used by the harness.

    ``decide`` returns the decision and the gradient-norm estimate it used
    (NaN for policies without one); ``commit`` settles internal state.
    """

    name = "policy"

    def decide(self, t: int, f_t: float, h: Histories, q: VirtualQueue, rng: np.random.Generator) -> tuple[int, float]:
        raise NotImplementedError

    def commit(self, t: int, decision: int, cost: float) -> None:
        pass


class RCCDAPolicy(Policy):
    name = "rccda"

    def __init__(self, cfg: PolicyConfig):
        self.cfg = cfg

    def decide(self, t, f_t, h, q, rng):
        ghat = rccda_ghat(h, self.cfg, t)
        return rccda_decide(f_t, h, q, self.cfg, t, ghat), ghat


class UniformPolicy(Policy):
    name = "uniform"

    def __init__(self, b: BaselineConfig):
        self.b = b

    def decide(self, t, f_t, h, q, rng):
        return uniform_decide(rng, self.b), math.nan


class PeriodicPolicy(Policy):
    name = "periodic"

    def __init__(self, b: BaselineConfig):
        self.b = b

    def decide(self, t, f_t, h, q, rng):
        return periodic_decide(t, self.b), math.nan


class _BudgetPolicy(Policy):
    def __init__(self, b: BaselineConfig, cost_fn: CostFn, avg_cost: float, budget_cap: float | None = None):
        self.b = b
        self.cost_fn = cost_fn
        cap = 10.0 * cost_fn(0) if budget_cap is None else budget_cap
        self.budget = TokenBudget(accrual=avg_cost, cap=cap)

    def _rule(self, h: Histories, t: int, cost: float) -> int:
        raise NotImplementedError

    def decide(self, t, f_t, h, q, rng):
        self.budget.accrue()
        return self._rule(h, t, self.cost_fn(t)), math.nan

    def commit(self, t, decision, cost):
        if decision:
            self.budget.pay(cost)


class BudgetIncreasePolicy(_BudgetPolicy):
    name = "budget_increase"

    def _rule(self, h, t, cost):
        return budget_increase_decide(h, self.budget, self.b, t, cost)


class BudgetThresholdPolicy(_BudgetPolicy):
    name = "budget_threshold"

    def _rule(self, h, t, cost):
        return budget_threshold_decide(h, self.budget, self.b, t, cost)


class NeverPolicy(Policy):
    name = "never"

    def decide(self, t, f_t, h, q, rng):
        return 0, math.nan


class AlwaysPolicy(Policy):
    name = "always"

    def decide(self, t, f_t, h, q, rng):
        return 1, math.nan
