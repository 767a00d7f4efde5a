"""Convergence and stability bounds evaluated on recorded traces.

Everything here is a pure function of traces and constants. The convergence
bound needs traces recorded with ``oracle_mode`` on, which adds full-pool
losses and gradients at every step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Sequence

import numpy as np
from scipy.special import rel_entr

from .drift_env import DatasetState, sample_batch
from .learner import LossSpec, full_gradient, full_loss, grad

if TYPE_CHECKING:
    from .harness import RunTrace

BOUND_TOL = 1e-9
LN2 = math.log(2.0)


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    satisfied: bool = field(init=False)
    slack: float = field(init=False)
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.satisfied = bool(self.lhs <= self.rhs + BOUND_TOL)
        self.slack = self.rhs - self.lhs

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "satisfied": self.satisfied,
            "slack": self.slack,
            "details": self.details,
        }


@dataclass(frozen=True)
class BoundConstants:
    l_smooth: float
    eta: float
    sigma_sq: float
    b_bound: float
    p_min: float
    delta_series: tuple[float, ...] = ()
    delta_sup: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "delta_series", tuple(float(d) for d in self.delta_series))
        if self.delta_sup is None:
            object.__setattr__(self, "delta_sup", max(self.delta_series, default=0.0))
        if not 0 < self.p_min <= 1:
            raise ValueError("p_min must lie in (0, 1]")
        if min(self.l_smooth, self.eta, self.sigma_sq, self.b_bound) < 0:
            raise ValueError("constants must be nonnegative")

    @property
    def mu(self) -> float:
        return (self.eta - 0.5 * self.l_smooth * self.eta**2) * self.p_min

    @property
    def variance_term(self) -> float:
        le = self.l_smooth * self.eta
        return le / (2.0 - le) * self.sigma_sq


def _require_mu(k: BoundConstants) -> float:
    mu = k.mu
    if not mu > 0:
        raise ValueError(f"mu = (eta - L eta^2 / 2) p_min = {mu} must be > 0 (needs eta < 2/L)")
    return mu


# ---------------------------------------------------------------------------
# drift-induced loss and Pinsker


def drift_induced_loss(params: np.ndarray, ds_t: DatasetState, ds_next: DatasetState, spec: LossSpec) -> float:
    """f(theta_t, D_{t+1}) - f(theta_t, D_t) over full pools."""
    return full_loss(params, ds_next, spec) - full_loss(params, ds_t, spec)


def mixture_drift_loss(domain_losses: np.ndarray, w_t: np.ndarray, w_next: np.ndarray) -> float:
    """Drift-induced loss of the domain mixture with weights ``w_t -> w_next``.

    ``domain_losses[d]`` is the expected loss under domain ``d`` at fixed
    parameters, so the mixture loss is linear in the weights.
    """
    return float(np.dot(np.asarray(w_next) - np.asarray(w_t), domain_losses))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats for discrete distributions on a shared support."""
    return float(rel_entr(np.asarray(p, float), np.asarray(q, float)).sum())


def pinsker_check(dist_a: Sequence[float], dist_b: Sequence[float], b_bound: float) -> BoundReport:
    """Largest expectation gap of a [0, B]-valued loss vs ``B sqrt(2 ln2 KL)``.

    The gap ``max_f E_b[f] - E_a[f]`` over losses in [0, B] equals B times the
    total variation distance. KL is in nats.
    """
    a, b = np.asarray(dist_a, float), np.asarray(dist_b, float)
    if a.shape != b.shape:
        raise ValueError("distributions must share a support")
    tv = 0.5 * float(np.abs(a - b).sum())
    kl = kl_divergence(a, b)
    rhs = b_bound * math.sqrt(2.0 * LN2 * kl) if kl > 0 else 0.0
    return BoundReport("pinsker", b_bound * tv, rhs, details={"l1": 2 * tv, "kl": kl})


def pinsker_trace_reports(trace: RunTrace, b_bound: float) -> list[BoundReport]:
    """Per-step check of the mixture drift loss against ``B sqrt(2 ln2 delta)``.

    ``delta`` is the KL between the realised compositions of consecutive
    steps, which is the drift the mixture loss actually saw.
    """
    out = []
    for r in trace.records:
        if math.isnan(r.mix_drift_loss):
            raise ValueError("trace lacks mixture drift losses; record with oracle_mode and the classifier")
        rhs = b_bound * math.sqrt(2.0 * LN2 * r.delta_actual)
        out.append(BoundReport(f"pinsker_step[{r.t}]", r.mix_drift_loss, rhs, details={"delta": r.delta_actual}))
    return out


# ---------------------------------------------------------------------------
# convergence bound


def _oracle_column(trace: RunTrace, name: str) -> np.ndarray:
    col = np.array([getattr(r, name) for r in trace.records], dtype=float)
    if np.isnan(col).any():
        raise ValueError(f"trace is missing oracle column {name!r}; rerun with oracle_mode")
    return col


def convergence_lhs(trace: RunTrace) -> float:
    """(1/T) sum_t ||grad f(theta_t, D_{t+1})||^2."""
    return float(_oracle_column(trace, "grad_sq_next").mean())


def convergence_rhs(trace: RunTrace, k: BoundConstants) -> float:
    mu = _require_mu(k)
    T = len(trace.records)
    f0 = _oracle_column(trace, "full_loss")[0]
    f_final = trace.final["full_loss"]
    drift = math.fsum(_oracle_column(trace, "drift_loss"))
    return (f0 - f_final + drift) / (T * mu) + k.variance_term


def convergence_report(traces: Sequence[RunTrace], k: BoundConstants) -> BoundReport:
    """Convergence bound on seed-averaged traces (both sides are linear in the trace)."""
    lhs = float(np.mean([convergence_lhs(tr) for tr in traces]))
    rhs = float(np.mean([convergence_rhs(tr, k) for tr in traces]))
    # the largest update probability floor for which the bound still holds
    mu_p = k.eta - 0.5 * k.l_smooth * k.eta**2
    num = float(np.mean([convergence_rhs(tr, k) - k.variance_term for tr in traces])) * k.mu
    room = lhs - k.variance_term
    p_crit = num / (mu_p * room) if room > 0 else math.inf
    return BoundReport("convergence", lhs, rhs, details={"p_min": k.p_min, "mu": k.mu,
                                                        "sigma_sq": k.sigma_sq, "p_min_critical": p_crit,
                                                        "seeds": len(traces)})


def drift_convergence_rhs(T: int, k: BoundConstants) -> tuple[float, float]:
    """Drift-only convergence bound with single and doubled drift coefficient.

    The two variants differ by a factor 2 on the drift sum; the larger one
    is the conservative verdict.
    """
    mu = _require_mu(k)
    root_sum = math.fsum(math.sqrt(d) for d in k.delta_series)
    c = math.sqrt(2.0 * LN2)
    single = k.b_bound / (T * mu) * (1.0 + c * root_sum) + k.variance_term
    double = k.b_bound / (T * mu) * (1.0 + 2.0 * c * root_sum) + k.variance_term
    return single, double


def drift_convergence_report(traces: Sequence[RunTrace], k: BoundConstants) -> BoundReport:
    """Drift-only bound against the seed-averaged gradient term, using each trace's drift series."""
    lhs = float(np.mean([convergence_lhs(tr) for tr in traces]))
    T = len(traces[0].records)
    pairs = [
        drift_convergence_rhs(T, BoundConstants(k.l_smooth, k.eta, k.sigma_sq, k.b_bound, k.p_min,
                                                [r.delta_t for r in tr.records]))
        for tr in traces
    ]
    single, double = (float(np.mean(col)) for col in zip(*pairs))
    return BoundReport("drift_convergence", lhs, max(single, double),
                       details={"rhs_single": single, "rhs_double": double})


# ---------------------------------------------------------------------------
# constraint bound


def constraint_bound_rhs(
    T: int,
    cost_series: Sequence[float],
    lam_bar: float,
    V: float,
    B: float,
    delta_series: Sequence[float] | float,
    mode: str = "sup",
) -> float:
    """Constraint-violation bound.

    The drift term carries no time index in the bound, so ``delta_series`` is
    reduced to its supremum (``mode="sup"``) or mean (``mode="mean"``). The
    cost sum runs over t = 1..T-1. A negative radicand, possible for tiny T
    with V = 0, is clamped to zero with a warning.
    """
    if np.isscalar(delta_series):
        delta = float(delta_series)
    else:
        ds = np.asarray(delta_series, float)
        if mode == "sup":
            delta = float(ds.max()) if ds.size else 0.0
        elif mode == "mean":
            delta = float(ds.mean()) if ds.size else 0.0
        else:
            raise ValueError("mode must be 'sup' or 'mean'")
    costs = np.asarray(cost_series, float)
    radicand = (
        lam_bar / T**2 * math.fsum(costs[1:T])
        - lam_bar / T
        + 2.0 * V * B / T * (5.0 + math.sqrt(2.0 * LN2 * delta))
    )
    if radicand < 0:
        warnings.warn(f"negative radicand {radicand:.3g} in the constraint bound; clamping to 0", RuntimeWarning)
        radicand = 0.0
    return math.sqrt(radicand)


def constraint_violation(trace: RunTrace) -> float:
    """Time-average spending minus the permitted average (may be negative)."""
    spent = math.fsum(r.cost * r.pi_t for r in trace.records)
    return spent / len(trace.records) - trace.lam_bar


def constraint_report(trace: RunTrace, V: float, B: float, mode: str = "sup") -> BoundReport:
    T = len(trace.records)
    costs = [r.cost for r in trace.records]
    deltas = [r.delta_t for r in trace.records]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rhs = constraint_bound_rhs(T, costs, trace.lam_bar, V, B, deltas, mode)
        other = constraint_bound_rhs(T, costs, trace.lam_bar, V, B, deltas, "mean" if mode == "sup" else "sup")
    return BoundReport(f"constraint[seed={trace.seed}]", constraint_violation(trace), rhs,
                       details={"mode": mode, "rhs_other_mode": other, "V": V, "B": B})


def queue_report(trace: RunTrace) -> BoundReport:
    """Violation <= Q(T)/T, since each step's spending minus the average is at most the queue growth."""
    T = len(trace.records)
    return BoundReport(f"queue[seed={trace.seed}]", constraint_violation(trace), trace.final["q"] / T)


# ---------------------------------------------------------------------------
# measured constants


def measure_sigma_sq(
    params: np.ndarray,
    ds: DatasetState,
    spec: LossSpec,
    batch_size: int,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Mean squared deviation of batch gradients from the full-pool gradient."""
    if trials < 100:
        raise ValueError("trials must be >= 100")
    full = full_gradient(params, ds, spec)
    total = 0.0
    for _ in range(trials):
        d = grad(params, sample_batch(ds, batch_size, rng), spec) - full
        total += float(d @ d)
    return total / trials


def measure_p_min(traces: Iterable[RunTrace], floor: float = 0.01) -> float:
    """Smallest per-step update frequency across seeds, floored at ``floor``."""
    pis = np.array([[r.pi_t for r in tr.records] for tr in traces], dtype=float)
    return max(floor, float(pis.mean(0).min()))


def telescoping_gap(trace: RunTrace) -> float:
    """sum_t [f_{t+1} - f_t] - (f_T - f_0) for the full-pool losses; zero up to rounding."""
    f = list(_oracle_column(trace, "full_loss")) + [trace.final["full_loss"]]
    steps = math.fsum(b - a for a, b in zip(f, f[1:]))
    return steps - (f[-1] - f[0])
