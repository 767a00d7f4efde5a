"""Synthetic drifting data streams.

Each domain is a set of class-conditional isotropic Gaussians. A fixed-size
pool (and a smaller holdout) starts out drawn from one source domain; a drift
schedule then replaces a fraction of the entries with fresh samples from an
incoming domain at chosen steps. Because every component is Gaussian, the KL
divergence between consecutive data distributions is available in closed form
or by quadrature, so the drift magnitude is known rather than estimated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp, rel_entr

_FLOOR_EPS = 1e-9


class LabeledSample(NamedTuple):
    x: np.ndarray
    y: int


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Class-conditional Gaussians ``N(class_means[k], class_cov_scale * I)``."""

    id: int
    class_means: np.ndarray
    class_cov_scale: float
    num_classes: int
    feature_dim: int

    def __post_init__(self) -> None:
        means = np.asarray(self.class_means, dtype=float)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if means.shape != (self.num_classes, self.feature_dim):
            raise ValueError(
                f"class_means must have shape ({self.num_classes}, {self.feature_dim}), got {means.shape}"
            )
        if not self.class_cov_scale > 0:
            raise ValueError("class_cov_scale must be > 0")
        means.setflags(write=False)
        object.__setattr__(self, "class_means", means)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DomainSpec):
            return NotImplemented
        return (
            self.id == other.id
            and self.class_cov_scale == other.class_cov_scale
            and self.num_classes == other.num_classes
            and self.feature_dim == other.feature_dim
            and np.array_equal(self.class_means, other.class_means)
        )

    __hash__ = None  # type: ignore[assignment]


def make_domain(
    id: int,
    num_classes: int,
    feature_dim: int,
    separation: float,
    cov_scale: float,
    rng_seed: int,
) -> DomainSpec:
    """Place ``num_classes`` means at pairwise distance >= ``separation``.

    Means are Gaussian draws with scale ``separation``; draws violating the
    spacing are rejected, and the scale grows slowly if rejections pile up.
    """
    if num_classes < 1 or feature_dim < 1:
        raise ValueError("num_classes and feature_dim must be positive")
    if not separation > 0 or not cov_scale > 0:
        raise ValueError("separation and cov_scale must be positive")
    rng = np.random.default_rng(rng_seed)
    scale = separation
    for attempt in range(10_000):
        means = rng.normal(0.0, scale, size=(num_classes, feature_dim))
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= separation:
            return DomainSpec(id, means, float(cov_scale), num_classes, feature_dim)
        if attempt % 50 == 49:
            scale *= 1.1
    raise RuntimeError("could not place class means; increase feature_dim or lower separation")


class ScheduleKind(str, enum.Enum):
    CONSTANT = "constant"
    BURST = "burst"
    STEP = "step"
    WAVE = "wave"
    SPIKES = "spikes"


@dataclass(frozen=True)
class DriftSchedule:
    """When, how strongly, and from which domain data flows into the pool.

    Field use per kind:

    * Burst: ``event_times`` with one rate per event in ``rates``.
    * Step: ``event_times=(onset,)``, ``rates=(r,)``; rate ``r`` at every step
      from the onset on. The incoming domain advances every ``period`` steps.
    * Wave: ``rates=(r,)``; waves of ``duration`` steps start every ``period``
      steps, offset by ``event_times[0]`` (default 0).
    * Spikes: ``num_events`` spikes of ``duration`` steps at seeded random
      start times, rates uniform in ``rate_range``.

    Event ``i`` (or wave/step phase ``i``) draws from
    ``incoming_domains[i % len(incoming_domains)]``.
    """

    kind: ScheduleKind
    horizon: int
    event_times: tuple[int, ...] = ()
    rates: tuple[float, ...] = ()
    period: int | None = None
    duration: int = 1
    num_events: int = 0
    rate_range: tuple[float, float] = (0.1, 0.5)
    incoming_domains: tuple[int, ...] = (1,)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        object.__setattr__(self, "event_times", tuple(int(e) for e in self.event_times))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        object.__setattr__(self, "incoming_domains", tuple(int(d) for d in self.incoming_domains))
        object.__setattr__(self, "rate_range", tuple(float(r) for r in self.rate_range))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ValueError("every rate must lie in [0, 1]")
        ev = self.event_times
        if any(b <= a for a, b in zip(ev, ev[1:])):
            raise ValueError("event_times must be strictly increasing")
        if any(not 0 <= e < self.horizon for e in ev):
            raise ValueError("event_times must lie in [0, horizon)")
        if self.kind is not ScheduleKind.CONSTANT and not self.incoming_domains:
            raise ValueError("incoming_domains must be non-empty")
        if self.kind is ScheduleKind.BURST and len(self.rates) != len(ev):
            raise ValueError("burst needs one rate per event time")
        if self.kind is ScheduleKind.STEP and (len(ev) != 1 or len(self.rates) != 1):
            raise ValueError("step needs exactly one onset and one rate")
        if self.kind is ScheduleKind.WAVE:
            if len(self.rates) != 1 or not self.period or self.period < 1:
                raise ValueError("wave needs one rate and a positive period")
            if not 1 <= self.duration <= self.period:
                raise ValueError("wave duration must lie in [1, period]")
        if self.kind is ScheduleKind.SPIKES:
            lo, hi = self.rate_range
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("rate_range must satisfy 0 <= lo <= hi <= 1")
            if self.duration < 1 or self.num_events < 0:
                raise ValueError("spikes need duration >= 1 and num_events >= 0")
            if self.num_events > max(self.horizon - self.duration + 1, 0):
                raise ValueError("too many spikes for the horizon")

    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray]:
        T = self.horizon
        rate = np.zeros(T)
        incoming = np.full(T, -1, dtype=np.int64)
        doms = self.incoming_domains

        if self.kind is ScheduleKind.BURST:
            for i, (e, r) in enumerate(zip(self.event_times, self.rates)):
                rate[e] = r
                incoming[e] = doms[i % len(doms)]
        elif self.kind is ScheduleKind.STEP:
            onset, r = self.event_times[0], self.rates[0]
            steps = np.arange(onset, T)
            rate[onset:] = r
            phase = (steps - onset) // self.period if self.period else np.zeros_like(steps)
            incoming[onset:] = np.asarray(doms)[phase % len(doms)]
        elif self.kind is ScheduleKind.WAVE:
            offset = self.event_times[0] if self.event_times else 0
            for k, start in enumerate(range(offset, T, self.period)):
                stop = min(start + self.duration, T)
                rate[start:stop] = self.rates[0]
                incoming[start:stop] = doms[k % len(doms)]
        elif self.kind is ScheduleKind.SPIKES:
            rng = np.random.default_rng(self.seed)
            starts = np.sort(
                rng.choice(T - self.duration + 1, size=self.num_events, replace=False)
            )
            lo, hi = self.rate_range
            spike_rates = rng.uniform(lo, hi, size=self.num_events)
            # later spikes overwrite earlier ones where they overlap
            for i, (s, r) in enumerate(zip(starts, spike_rates)):
                rate[s : s + self.duration] = r
                incoming[s : s + self.duration] = doms[i % len(doms)]
        rate.setflags(write=False)
        incoming.setflags(write=False)
        return rate, incoming

    def rate_series(self) -> np.ndarray:
        return self._tables[0]

    def incoming_series(self) -> np.ndarray:
        return self._tables[1]


def _check_step(schedule: DriftSchedule, t: int) -> None:
    if not 0 <= t < schedule.horizon:
        raise ValueError(f"step {t} outside horizon [0, {schedule.horizon})")


def drift_rate(schedule: DriftSchedule, t: int) -> float:
    """Fraction of the pool replaced at step ``t``."""
    _check_step(schedule, t)
    return float(schedule.rate_series()[t])


def incoming_domain(schedule: DriftSchedule, t: int) -> int:
    """Domain index supplying fresh samples at step ``t`` (-1 when idle)."""
    _check_step(schedule, t)
    return int(schedule.incoming_series()[t])


def default_schedule(kind: str | ScheduleKind, horizon: int, num_domains: int = 4, seed: int = 0) -> DriftSchedule:
    """Reference schedules used by the shipped configs and the acceptance suite.

    Burst events recur every 100 steps starting at 50, so a 250-step horizon
    gets bursts at 50 and 150.
    """
    kind = ScheduleKind(kind)
    incoming = tuple(range(1, num_domains)) or (0,)
    if kind is ScheduleKind.CONSTANT:
        return DriftSchedule(kind, horizon)
    if kind is ScheduleKind.BURST:
        events = tuple(range(min(50, horizon - 1), horizon, 100))
        return DriftSchedule(kind, horizon, event_times=events, rates=(0.8,) * len(events),
                             incoming_domains=incoming)
    if kind is ScheduleKind.STEP:
        onset = min(50, horizon - 1)
        return DriftSchedule(kind, horizon, event_times=(onset,), rates=(0.02,), period=50,
                             incoming_domains=incoming + (0,))
    if kind is ScheduleKind.WAVE:
        return DriftSchedule(kind, horizon, event_times=(min(30, horizon - 1),), rates=(0.04,),
                             period=100, duration=40, incoming_domains=incoming)
    return DriftSchedule(kind, horizon, num_events=max(1, horizon // 50), duration=3,
                         rate_range=(0.2, 0.6), incoming_domains=incoming, seed=seed)


# ---------------------------------------------------------------------------
# pools


@dataclass(frozen=True, eq=False)
class Pool:
    """Fixed-length sample store; ``ids`` give every sample a unique identity."""

    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], int(self.y[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True, eq=False)
class Batch:
    x: np.ndarray
    y: np.ndarray
    t: int = 0

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[LabeledSample]:
        for xi, yi in zip(self.x, self.y):
            yield LabeledSample(xi, int(yi))


@dataclass(frozen=True, eq=False)
class DatasetState:
    pool: Pool
    holdout: Pool
    composition: np.ndarray
    t: int
    domains: tuple[DomainSpec, ...]
    data_bound: float | None = None
    next_id: int = 0

    def pool_batch(self) -> Batch:
        return Batch(self.pool.x, self.pool.y, self.t)

    def holdout_batch(self) -> Batch:
        return Batch(self.holdout.x, self.holdout.y, self.t)


def sample_domain(
    domain: DomainSpec, n: int, rng: np.random.Generator, data_bound: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labelled points with a uniform class prior.

    With ``data_bound`` set, points are radially projected into the ball of
    that radius so the feature support is bounded.
    """
    y = rng.integers(domain.num_classes, size=n)
    x = domain.class_means[y] + math.sqrt(domain.class_cov_scale) * rng.standard_normal(
        (n, domain.feature_dim)
    )
    if data_bound is not None:
        norms = np.sqrt((x * x).sum(1, keepdims=True))
        x = np.where(norms > data_bound, x * (data_bound / np.maximum(norms, 1e-300)), x)
    return x, y


def _composition(domain: np.ndarray, num_domains: int) -> np.ndarray:
    comp = np.bincount(domain, minlength=num_domains) / len(domain)
    comp.setflags(write=False)
    return comp


def init_dataset(
    domains: Sequence[DomainSpec],
    pool_size: int,
    holdout_size: int,
    rng: np.random.Generator,
    holdout_rng: np.random.Generator | None = None,
    source_domain: int = 0,
    data_bound: float | None = None,
) -> DatasetState:
    """Pool and holdout drawn purely from ``source_domain``."""
    domains = tuple(domains)
    if [d.id for d in domains] != list(range(len(domains))):
        raise ValueError("domain ids must be 0..n-1 in order")
    if pool_size < 1 or holdout_size < 1:
        raise ValueError("pool_size and holdout_size must be positive")
    holdout_rng = rng if holdout_rng is None else holdout_rng
    src = domains[source_domain]
    px, py = sample_domain(src, pool_size, rng, data_bound)
    hx, hy = sample_domain(src, holdout_size, holdout_rng, data_bound)
    pdom = np.full(pool_size, source_domain, dtype=np.int64)
    hdom = np.full(holdout_size, source_domain, dtype=np.int64)
    pool = Pool(px, py, pdom, np.arange(pool_size))
    holdout = Pool(hx, hy, hdom, np.arange(pool_size, pool_size + holdout_size))
    return DatasetState(
        pool=pool,
        holdout=holdout,
        composition=_composition(pdom, len(domains)),
        t=0,
        domains=domains,
        data_bound=data_bound,
        next_id=pool_size + holdout_size,
    )


def _replace_entries(
    pool: Pool, k: int, domain: DomainSpec, rng: np.random.Generator, data_bound: float | None, first_id: int
) -> Pool:
    idx = rng.choice(len(pool), size=k, replace=False)
    nx, ny = sample_domain(domain, k, rng, data_bound)
    x, y, dom, ids = pool.x.copy(), pool.y.copy(), pool.domain.copy(), pool.ids.copy()
    x[idx], y[idx], dom[idx] = nx, ny, domain.id
    ids[idx] = np.arange(first_id, first_id + k)
    return Pool(x, y, dom, ids)


def replacement_count(rate: float, size: int) -> int:
    return int(math.floor(rate * size + _FLOOR_EPS))


def advance(
    ds: DatasetState,
    schedule: DriftSchedule,
    t: int,
    rng: np.random.Generator,
    holdout_rng: np.random.Generator | None = None,
) -> DatasetState:
    """Apply step ``t`` of the schedule and return the state for ``t + 1``.

    ``floor(rate * |pool|)`` uniformly chosen pool entries, and the same
    fraction of the holdout, are overwritten with fresh samples from the
    incoming domain. The holdout uses ``holdout_rng`` when given.
    """
    if ds.t != t:
        raise ValueError(f"dataset is at step {ds.t}, cannot advance step {t}")
    rate = drift_rate(schedule, t)
    k = replacement_count(rate, len(ds.pool))
    kh = replacement_count(rate, len(ds.holdout))
    if k == 0 and kh == 0:
        return replace(ds, t=t + 1)
    dom = ds.domains[incoming_domain(schedule, t)]
    next_id = ds.next_id
    pool, holdout = ds.pool, ds.holdout
    if k:
        pool = _replace_entries(pool, k, dom, rng, ds.data_bound, next_id)
        next_id += k
    if kh:
        holdout = _replace_entries(holdout, kh, dom, rng if holdout_rng is None else holdout_rng,
                                   ds.data_bound, next_id)
        next_id += kh
    return replace(
        ds,
        pool=pool,
        holdout=holdout,
        composition=_composition(pool.domain, len(ds.domains)),
        t=t + 1,
        next_id=next_id,
    )


def sample_batch(ds: DatasetState, size: int, rng: np.random.Generator) -> Batch:
    """Uniform draw without replacement from the pool."""
    n = len(ds.pool)
    if not 1 <= size <= n:
        raise ValueError(f"batch size {size} outside [1, {n}]")
    if size == n:
        idx = rng.permutation(n)
    else:
        idx = rng.choice(n, size=size, replace=False)
    return Batch(ds.pool.x[idx], ds.pool.y[idx], ds.t)


# ---------------------------------------------------------------------------
# divergences


def gaussian_kl(mu_a: np.ndarray, var_a: float, mu_b: np.ndarray, var_b: float) -> float:
    """KL(N(mu_a, var_a I) || N(mu_b, var_b I)) in nats."""
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    d = mu_a.size
    sq = float(((mu_a - mu_b) ** 2).sum())
    return 0.5 * (d * var_a / var_b + sq / var_b - d + d * math.log(var_b / var_a))


def domain_kl(a: DomainSpec, b: DomainSpec, class_prior: Sequence[float] | None = None) -> float:
    """KL between the joint (x, y) laws of two domains sharing a class prior."""
    if a.feature_dim != b.feature_dim or a.num_classes != b.num_classes:
        raise ValueError("domains differ in feature_dim or num_classes")
    prior = np.full(a.num_classes, 1.0 / a.num_classes) if class_prior is None else np.asarray(class_prior, float)
    if prior.shape != (a.num_classes,) or abs(prior.sum() - 1.0) > 1e-9 or (prior < 0).any():
        raise ValueError("class_prior must be a probability vector over the classes")
    return float(
        sum(
            p * gaussian_kl(a.class_means[k], a.class_cov_scale, b.class_means[k], b.class_cov_scale)
            for k, p in enumerate(prior)
        )
    )


def mixture_weight_kl(w_a: np.ndarray, w_b: np.ndarray) -> float:
    """KL between mixture weight vectors, in nats.

    For two mixtures over the same components this upper-bounds the KL of the
    mixtures themselves, with equality when the components do not overlap.
    """
    return float(rel_entr(np.asarray(w_a, float), np.asarray(w_b, float)).sum())


@lru_cache(maxsize=64)
def _nominal_path(schedule: DriftSchedule, num_domains: int, pool_size: int | None, source: int) -> np.ndarray:
    T = schedule.horizon
    rates, incoming = schedule.rate_series(), schedule.incoming_series()
    w = np.zeros((T + 1, num_domains))
    w[0, source] = 1.0
    for t in range(T):
        r = rates[t]
        if pool_size is not None:
            r = replacement_count(r, pool_size) / pool_size
        w[t + 1] = (1.0 - r) * w[t]
        if r > 0:
            w[t + 1, incoming[t]] += r
    w.setflags(write=False)
    return w


def schedule_composition(
    schedule: DriftSchedule, num_domains: int, pool_size: int | None = None, source_domain: int = 0
) -> np.ndarray:
    """Expected pool composition at steps ``0..T`` under uniform replacement."""
    return _nominal_path(schedule, num_domains, pool_size, source_domain)


def schedule_kl(
    schedule: DriftSchedule,
    domains: Sequence[DomainSpec],
    t: int,
    pool_size: int | None = None,
    source_domain: int = 0,
) -> float:
    """Drift magnitude between steps ``t`` and ``t + 1`` of the expected path.

    Consecutive distributions are mixtures of the same domain components, so
    the weight KL bounds their divergence from above (tight for well separated
    domains). ``pool_size`` applies the same floor rounding as :func:`advance`.
    """
    _check_step(schedule, t)
    if drift_rate(schedule, t) == 0.0:
        return 0.0
    w = schedule_composition(schedule, len(domains), pool_size, source_domain)
    return mixture_weight_kl(w[t], w[t + 1])


def _mixture_log_density(
    domains: Sequence[DomainSpec], weights: np.ndarray, prior: np.ndarray, grid: np.ndarray
) -> np.ndarray:
    """log p(x, y) on ``grid`` (points x dim); returns shape (classes, points)."""
    d = grid.shape[1]
    rows = []
    for k in range(len(prior)):
        comps = []
        for dom, w in zip(domains, weights):
            if w <= 0:
                continue
            var = dom.class_cov_scale
            sq = ((grid - dom.class_means[k]) ** 2).sum(1)
            comps.append(math.log(w) - 0.5 * sq / var - 0.5 * d * math.log(2 * math.pi * var))
        rows.append(math.log(prior[k]) + logsumexp(np.stack(comps), axis=0))
    return np.stack(rows)


def mixture_kl_quadrature(
    domains: Sequence[DomainSpec],
    w_a: Sequence[float],
    w_b: Sequence[float],
    class_prior: Sequence[float] | None = None,
    points: int = 10_000,
    width: float = 10.0,
) -> float:
    """Brute-force KL between two domain mixtures by grid quadrature.

    Supports 1-D and 2-D features. ``points`` is the total grid size (split
    evenly over the axes for 2-D); the grid spans every mean +- ``width``
    standard deviations.
    """
    d = domains[0].feature_dim
    if d not in (1, 2):
        raise ValueError("quadrature supports feature_dim 1 or 2")
    k = domains[0].num_classes
    prior = np.full(k, 1.0 / k) if class_prior is None else np.asarray(class_prior, float)
    means = np.concatenate([dom.class_means for dom in domains])
    sd = math.sqrt(max(dom.class_cov_scale for dom in domains))
    lo, hi = means.min(0) - width * sd, means.max(0) + width * sd
    if d == 1:
        axis = np.linspace(lo[0], hi[0], points)
        grid = axis[:, None]
        cell = axis[1] - axis[0]
    else:
        n = int(round(math.sqrt(points)))
        ax0, ax1 = np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)
        g0, g1 = np.meshgrid(ax0, ax1, indexing="ij")
        grid = np.column_stack([g0.ravel(), g1.ravel()])
        cell = (ax0[1] - ax0[0]) * (ax1[1] - ax1[0])
    la = _mixture_log_density(domains, np.asarray(w_a, float), prior, grid)
    lb = _mixture_log_density(domains, np.asarray(w_b, float), prior, grid)
    integrand = np.exp(la) * (la - lb)
    return float(integrand.sum() * cell)
