"""Episode runner, suite aggregation, and trace I/O.

One step of :func:`run_episode`:

1. evaluate ``f_t`` on the holdout (or the full pool),
2. append it to the loss history,
3-4. let the policy estimate the gradient norm and decide,
5. on an update, run SGD and log the first stochastic gradient norm,
6. log the decision,
7. advance the virtual queue,
8. advance the drifting dataset.

Every random consumer owns a child stream of ``SeedSequence(seed)``, so the
data stream is identical across policies for a given seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import rel_entr

from . import analysis
from .config import ConfigError, PolicySpec, RunConfig, parse_config
from .drift_env import (
    Batch,
    DatasetState,
    DomainSpec,
    advance,
    init_dataset,
    make_domain,
    sample_domain,
    schedule_composition,
)
from .learner import (
    LearnerConfig,
    LossKind,
    LossSpec,
    full_gradient,
    full_loss,
    init_params,
    loss,
    loss_and_accuracy,
    pretrain,
    sgd_update,
    smoothness_constant,
)
from .policies import (
    AlwaysPolicy,
    BaselineConfig,
    BudgetIncreasePolicy,
    BudgetThresholdPolicy,
    Histories,
    NeverPolicy,
    PeriodicPolicy,
    Policy,
    PolicyConfig,
    RCCDAPolicy,
    UniformPolicy,
    VirtualQueue,
    constant_cost,
    queue_step,
    series_cost,
)

STREAMS = ("data", "holdout", "sgd", "policy", "pretrain", "target", "reference", "eval")
NAN = math.nan

BASE_COLUMNS = ("t", "f_t", "pi_t", "q_t", "accuracy", "drift_rate", "delta_t", "ghat")
EXTRA_COLUMNS = ("cost", "grad_norm", "delta_actual")
ORACLE_COLUMNS = ("grad_norm_true", "full_loss", "loss_next", "drift_loss", "grad_sq_next", "mix_drift_loss")


@dataclass(slots=True, eq=False)
class StepRecord:
    t: int
    f_t: float
    pi_t: int
    q_t: float
    accuracy: float
    drift_rate: float
    delta_t: float
    ghat: float
    cost: float
    grad_norm: float
    delta_actual: float
    composition: tuple[float, ...]
    grad_norm_true: float = NAN
    full_loss: float = NAN
    loss_next: float = NAN
    drift_loss: float = NAN
    grad_sq_next: float = NAN
    mix_drift_loss: float = NAN

    def __post_init__(self) -> None:
        if self.pi_t not in (0, 1):
            raise ValueError("pi_t must be 0 or 1")
        if not self.q_t >= 0:
            raise ValueError("q_t must be >= 0")

    def values(self) -> tuple:
        return tuple(getattr(self, f.name) for f in dataclasses.fields(self))

    def __eq__(self, other: object) -> bool:
        # bitwise: NaN equals NaN, 0.0 differs from -0.0
        if not isinstance(other, StepRecord):
            return NotImplemented
        return repr(self.values()) == repr(other.values())


@dataclass(eq=False)
class RunTrace:
    config: dict[str, Any]
    policy: str
    seed: int
    records: list[StepRecord]
    lam_bar: float
    final: dict[str, Any]
    config_digest: str
    stream_digest: str
    summary: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RunTrace):
            return NotImplemented
        return (
            self.policy == other.policy
            and self.seed == other.seed
            and self.config_digest == other.config_digest
            and self.stream_digest == other.stream_digest
            and repr(self.lam_bar) == repr(other.lam_bar)
            and repr(_canon(self.final)) == repr(_canon(other.final))
            and self.records == other.records
        )


def _canon(d: Mapping[str, Any]) -> list:
    return sorted((k, tuple(v) if isinstance(v, (list, tuple, np.ndarray)) else v) for k, v in d.items())


# ---------------------------------------------------------------------------
# episode construction


@dataclass(frozen=True, eq=False)
class EpisodeSetup:
    """Everything derived from a config that does not depend on the seed."""

    cfg: RunConfig
    domains: tuple[DomainSpec, ...]
    loss_spec_proto: LossSpec | None
    learner: LearnerConfig
    l_smooth: float
    delta_nominal: np.ndarray


def build_domains(cfg: RunConfig) -> tuple[DomainSpec, ...]:
    d = cfg.data
    return tuple(
        make_domain(i, d.num_classes, d.feature_dim, d.separation, d.cov_scale,
                    int(np.random.SeedSequence([d.domain_seed, i]).generate_state(1)[0]))
        for i in range(d.num_domains)
    )


def nominal_delta_series(cfg: RunConfig) -> np.ndarray:
    """Per-step drift magnitude along the expected composition path."""
    w = schedule_composition(cfg.schedule, cfg.data.num_domains, cfg.data.pool_size, cfg.data.source_domain)
    rates = cfg.schedule.rate_series()
    kl = rel_entr(w[:-1], w[1:]).sum(1)
    return np.where(rates > 0, kl, 0.0)


def learner_smoothness(cfg: RunConfig) -> float:
    if cfg.analysis.l_smooth is not None:
        return cfg.analysis.l_smooth
    if cfg.learner.loss is LossKind.QUADRATIC:
        return 1.0
    return smoothness_constant(LossSpec(LossKind.SOFTMAX, cfg.data.num_classes), cfg.data.data_bound)


def prepare(cfg: RunConfig) -> EpisodeSetup:
    ls = cfg.learner
    if ls.loss is LossKind.SOFTMAX and cfg.data.data_bound is None:
        raise ConfigError("data.data_bound", "the classifier needs bounded features for a finite smoothness constant")
    L = learner_smoothness(cfg)
    batch = ls.batch_size or cfg.data.pool_size
    try:
        learner = LearnerConfig(ls.alpha, ls.steps_per_update, batch, L)
    except ValueError as exc:
        raise ConfigError("learner.alpha", str(exc)) from None
    proto = None
    if ls.loss is LossKind.SOFTMAX:
        proto = LossSpec(LossKind.SOFTMAX, cfg.data.num_classes, ls.clamp_b)
    return EpisodeSetup(cfg, build_domains(cfg), proto, learner, L, nominal_delta_series(cfg))


def target_path(cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """``c_0 = 0`` and ``c_{t+1} = c_t + scale * r(t) * u_t`` with random unit ``u_t``."""
    T, dim = cfg.horizon, cfg.learner.target_dim
    u = rng.standard_normal((T, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    steps = cfg.learner.target_scale * cfg.schedule.rate_series()[:, None] * u
    path = np.vstack([np.zeros((1, dim)), np.cumsum(steps, axis=0)])
    path.setflags(write=False)
    return path


def make_policy(spec: PolicySpec, setup: EpisodeSetup) -> Policy:
    cost_fn = series_cost(spec.cost) if isinstance(spec.cost, tuple) else constant_cost(spec.cost)
    kind = spec.kind
    if kind == "rccda":
        eta = spec.eta if spec.eta is not None else setup.learner.alpha
        L = spec.l_smooth if spec.l_smooth is not None else setup.l_smooth
        return RCCDAPolicy(PolicyConfig(spec.v_weight, eta, L, cost_fn, spec.avg_cost, spec.estimator,
                                        spec.threshold_form))
    if kind in ("never", "always"):
        return NeverPolicy() if kind == "never" else AlwaysPolicy()
    b = BaselineConfig(min(1.0, spec.avg_cost / spec.cost_at(0)), spec.consec_n, spec.window_len, spec.eps)
    if kind == "uniform":
        return UniformPolicy(b)
    if kind == "periodic":
        return PeriodicPolicy(b)
    cls = BudgetIncreasePolicy if kind == "budget_increase" else BudgetThresholdPolicy
    return cls(b, cost_fn, spec.avg_cost, spec.budget_cap)


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def _reference_sets(setup: EpisodeSetup, rng: np.random.Generator) -> list[Batch]:
    n, bound = setup.cfg.data.reference_size, setup.cfg.data.data_bound
    out = []
    for dom in setup.domains:
        x, y = sample_domain(dom, n, rng, bound)
        out.append(Batch(x, y, 0))
    return out


def _stream_update(h: Any, ds: DatasetState) -> None:
    h.update(ds.pool.ids.tobytes())
    h.update(ds.pool.x.tobytes())
    h.update(ds.holdout.ids.tobytes())


def run_episode(cfg: RunConfig, seed: int, policy: PolicySpec | int | None = None,
                setup: EpisodeSetup | None = None) -> RunTrace:
    """Simulate one (config, policy, seed) episode; deterministic in its inputs."""
    if setup is None:
        setup = prepare(cfg)
    if policy is None:
        pspec = cfg.policy
    elif isinstance(policy, int):
        pspec = cfg.policies[policy]
    else:
        pspec = policy
    rngs = seed_streams(seed)
    ls, dcfg, T = cfg.learner, cfg.data, cfg.horizon
    quadratic = ls.loss is LossKind.QUADRATIC

    if quadratic:
        spec = LossSpec(LossKind.QUADRATIC, target_path=target_path(cfg, rngs["target"]))
        theta = spec.target(0).copy()
        if ls.init_offset > 0:
            u = rngs["target"].standard_normal(ls.target_dim)
            theta = theta + ls.init_offset * u / np.linalg.norm(u)
    else:
        spec = setup.loss_spec_proto

    ds = init_dataset(setup.domains, dcfg.pool_size, dcfg.holdout_size, rngs["data"], rngs["holdout"],
                      dcfg.source_domain, dcfg.data_bound)
    if not quadratic:
        theta = init_params(spec, dcfg.feature_dim)
        theta = pretrain(theta, ds, setup.learner, spec, ls.pretrain_steps, rngs["pretrain"])
    refs = _reference_sets(setup, rngs["reference"]) if (cfg.oracle_mode and not quadratic) else None

    pol = make_policy(pspec, setup)
    cost_at = pspec.cost_at
    lam_bar = pspec.avg_cost
    rates = cfg.schedule.rate_series()
    delta_nom = setup.delta_nominal
    hist = Histories()
    q = VirtualQueue(0.0)
    digest = hashlib.sha256()
    _stream_update(digest, ds)
    records: list[StepRecord] = []
    hold_n = ls.holdout_batch

    for t in range(T):
        # (1) inference loss
        if ls.loss_source == "train":
            f_t, acc = loss_and_accuracy(theta, ds.pool_batch(), spec)
            if not quadratic:
                acc = loss_and_accuracy(theta, ds.holdout_batch(), spec)[1]
        elif hold_n is not None and hold_n < len(ds.holdout):
            idx = rngs["eval"].choice(len(ds.holdout), hold_n, replace=False)
            f_t = loss(theta, Batch(ds.holdout.x[idx], ds.holdout.y[idx], t), spec)
            acc = NAN if quadratic else loss_and_accuracy(theta, ds.holdout_batch(), spec)[1]
        else:
            f_t, acc = loss_and_accuracy(theta, ds.holdout_batch(), spec)
        # (2) history
        hist.record_loss(f_t)
        # (3-4) estimate and decide
        cost = cost_at(t)
        decision, ghat = pol.decide(t, f_t, hist, q, rngs["policy"])
        oracle = {}
        if cfg.oracle_mode:
            g_true = full_gradient(theta, ds, spec)
            oracle["grad_norm_true"] = float(np.sqrt(g_true @ g_true))
            oracle["full_loss"] = full_loss(theta, ds, spec)
        # (5) update
        grad_norm = NAN
        theta_t = theta
        if decision:
            theta, g0 = sgd_update(theta, ds, setup.learner, spec, rngs["sgd"])
            grad_norm = float(np.sqrt(g0 @ g0))
            hist.record_update(t, grad_norm)
        pol.commit(t, decision, cost)
        # (6) decision history
        hist.record_decision(decision)
        # (7) queue
        q_t = q.q
        q = queue_step(q, cost, decision, lam_bar)
        # (8) dataset
        ds_next = advance(ds, cfg.schedule, t, rngs["data"], rngs["holdout"])
        if ds_next.pool is not ds.pool or ds_next.holdout is not ds.holdout:
            _stream_update(digest, ds_next)
        w_t, w_next = ds.composition, ds_next.composition
        delta_actual = 0.0 if w_next is w_t else float(rel_entr(w_t, w_next).sum())
        if cfg.oracle_mode:
            oracle["loss_next"] = full_loss(theta_t, ds_next, spec)
            oracle["drift_loss"] = oracle["loss_next"] - oracle["full_loss"]
            g_next = full_gradient(theta_t, ds_next, spec)
            oracle["grad_sq_next"] = float(g_next @ g_next)
            if refs is not None:
                if w_next is w_t:
                    oracle["mix_drift_loss"] = 0.0
                else:
                    dl = np.array([loss(theta_t, r, spec) for r in refs])
                    oracle["mix_drift_loss"] = analysis.mixture_drift_loss(dl, w_t, w_next)
        records.append(StepRecord(
            t, f_t, decision, q_t, acc, float(rates[t]), float(delta_nom[t]), ghat, float(cost),
            grad_norm, delta_actual, tuple(float(v) for v in w_t), **oracle,
        ))
        ds = ds_next

    final: dict[str, Any] = {"q": q.q, "composition": [float(v) for v in ds.composition],
                             "updates": len(hist.gradients)}
    if cfg.oracle_mode:
        final["full_loss"] = full_loss(theta, ds, spec)
    tr = RunTrace(dict(cfg.raw), pspec.name, seed, records, lam_bar, final, cfg.digest(),
                  digest.hexdigest()[:16])
    tr.summary = trace_summary(tr, cfg, pspec)
    return tr


def loss_bound(cfg: RunConfig, traces: Iterable[RunTrace] = ()) -> float:
    """Loss bound B: the clamp for the classifier, the largest seen loss for the quadratic."""
    if cfg.learner.loss is LossKind.SOFTMAX:
        return LossSpec(LossKind.SOFTMAX, cfg.data.num_classes, cfg.learner.clamp_b).clamp_b
    vals = [r.f_t for tr in traces for r in tr.records]
    return max(vals, default=0.0)


def trace_reports(tr: RunTrace, cfg: RunConfig, pspec: PolicySpec) -> list[analysis.BoundReport]:
    """Per-trace bound checks: the queue inequality, plus the constraint bound for RCCDA."""
    reports = [analysis.queue_report(tr)]
    if pspec.kind == "rccda":
        reports.append(analysis.constraint_report(tr, pspec.v_weight, loss_bound(cfg, [tr]),
                                                cfg.analysis.drift_mode))
    for r in reports:
        r.name = f"{pspec.name}:{r.name}"
    return reports


def trace_summary(tr: RunTrace, cfg: RunConfig, pspec: PolicySpec) -> dict[str, Any]:
    acc = tr.column("accuracy")
    return {
        "policy": tr.policy,
        "seed": tr.seed,
        "mean_accuracy": None if np.isnan(acc).all() else float(acc.mean()),
        "mean_loss": float(tr.column("f_t").mean()),
        "update_rate": float(tr.column("pi_t").mean()),
        "violation": analysis.constraint_violation(tr),
        "final_queue": tr.final["q"],
        "bounds": [r.to_dict() for r in trace_reports(tr, cfg, pspec)],
    }


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    traces: dict[tuple[str, int], RunTrace]
    table: list[dict[str, Any]]
    reports: list[analysis.BoundReport]
    config_digest: str

    @property
    def all_satisfied(self) -> bool:
        return all(r.satisfied for r in self.reports)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_digest": self.config_digest,
            "table": self.table,
            "bounds": [r.to_dict() for r in self.reports],
            "all_satisfied": self.all_satisfied,
            "stream_digests": {f"{p}/{s}": tr.stream_digest for (p, s), tr in sorted(self.traces.items())},
        }


def _episode_job(args: tuple[dict, int, int]) -> RunTrace:
    raw, pidx, seed = args
    return run_episode(parse_config(raw), seed, pidx)


def run_suite(
    cfg: RunConfig,
    policies: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
    parallel: int = 1,
    bounds: bool = True,
) -> SuiteResult:
    """Run every (policy, seed) pair and aggregate.

    ``policies`` index into ``cfg.policies`` (default: all). Episodes may run
    in worker processes; aggregation sorts by (policy, seed) so the result
    does not depend on completion order.
    """
    pidx = list(range(len(cfg.policies))) if policies is None else list(policies)
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not pidx or not seeds:
        raise ValueError("need at least one policy and one seed")
    names = [cfg.policies[i].name for i in pidx]
    if len(set(names)) != len(names):
        raise ValueError(f"policy names must be unique, got {names}; set 'label' to disambiguate")
    jobs = [(i, s) for i in pidx for s in seeds]
    if parallel > 1 and len(jobs) > 1:
        raw = dict(cfg.raw)
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_episode_job, [(raw, i, s) for i, s in jobs]))
    else:
        setup = prepare(cfg)
        results = [run_episode(cfg, s, i, setup) for i, s in jobs]
    traces = {(cfg.policies[i].name, s): tr for (i, s), tr in zip(jobs, results)}

    for s in seeds:
        digests = {traces[(n, s)].stream_digest for n in names}
        if len(digests) != 1:
            raise RuntimeError(f"policies consumed different data streams for seed {s}")

    table = []
    reports: list[analysis.BoundReport] = []
    for i, name in zip(pidx, names):
        trs = [traces[(name, s)] for s in seeds]
        acc = [tr.summary["mean_accuracy"] for tr in trs]
        rate = [tr.summary["update_rate"] for tr in trs]
        row = {
            "policy": name,
            "schedule": cfg.schedule.kind.value,
            "seeds": len(trs),
            "update_rate_mean": float(np.mean(rate)),
            "update_rate_std": float(np.std(rate)),
            "loss_mean": float(np.mean([tr.summary["mean_loss"] for tr in trs])),
        }
        if acc[0] is not None:
            row["accuracy_mean"] = float(np.mean(acc))
            row["accuracy_std"] = float(np.std(acc))
        table.append(row)
        if bounds:
            reports.extend(_policy_reports(cfg, cfg.policies[i], trs))
    return SuiteResult(traces, table, reports, cfg.digest())


def _policy_reports(cfg: RunConfig, pspec: PolicySpec, trs: list[RunTrace]) -> list[analysis.BoundReport]:
    reps = [r for tr in trs for r in trace_reports(tr, cfg, pspec)]
    if cfg.oracle_mode:
        reps.extend(oracle_reports(cfg, pspec, trs))
    return reps


def bound_constants(cfg: RunConfig, trs: Sequence[RunTrace], setup: EpisodeSetup | None = None) -> analysis.BoundConstants:
    setup = setup or prepare(cfg)
    p_min = cfg.analysis.p_min or analysis.measure_p_min(trs, cfg.analysis.p_min_floor)
    if cfg.learner.loss is LossKind.QUADRATIC:
        sigma_sq = 0.0
    else:
        sigma_sq = cfg.analysis.sigma_safety * measure_initial_sigma(cfg, setup)
    return analysis.BoundConstants(setup.l_smooth, setup.learner.alpha, sigma_sq, loss_bound(cfg, trs), p_min,
                                     [r.delta_t for r in trs[0].records])


def measure_initial_sigma(cfg: RunConfig, setup: EpisodeSetup) -> float:
    """Gradient noise at the pretrained model on the initial pool (seed 0 streams)."""
    rngs = seed_streams(0)
    ds = init_dataset(setup.domains, cfg.data.pool_size, cfg.data.holdout_size, rngs["data"], rngs["holdout"],
                      cfg.data.source_domain, cfg.data.data_bound)
    spec = setup.loss_spec_proto
    theta = init_params(spec, cfg.data.feature_dim)
    theta = pretrain(theta, ds, setup.learner, spec, cfg.learner.pretrain_steps, rngs["pretrain"])
    return analysis.measure_sigma_sq(theta, ds, spec, setup.learner.batch_size, cfg.analysis.sigma_trials,
                                     rngs["eval"])


def oracle_reports(cfg: RunConfig, pspec: PolicySpec, trs: list[RunTrace]) -> list[analysis.BoundReport]:
    k = bound_constants(cfg, trs)
    out = []
    for rep in (analysis.convergence_report(trs, k), analysis.drift_convergence_report(trs, k)):
        rep.name = f"{pspec.name}:{rep.name}"
        out.append(rep)
    if cfg.learner.loss is LossKind.SOFTMAX:
        steps = [r for tr in trs for r in analysis.pinsker_trace_reports(tr, k.b_bound)]
        moving = [r for r in steps if r.details["delta"] > 0] or steps
        worst = min(moving, key=lambda r: r.slack)
        out.append(analysis.BoundReport(
            f"{pspec.name}:pinsker_all_steps", worst.lhs, worst.rhs,
            details={"steps": len(steps), "drift_steps": len(moving),
                     "violations": sum(not r.satisfied for r in steps), "worst_step": worst.name},
        ))
    return out


# ---------------------------------------------------------------------------
# replay


def replay_decisions(trace: RunTrace, cfg: RunConfig | None = None) -> list[StepRecord]:
    """Recompute the bookkeeping columns from the logged losses and gradient norms.

    Rebuilds the policy with the episode's policy stream, feeds it ``f_t`` and
    the logged gradient norms, and returns the records with ``ghat``,
    ``pi_t``, ``q_t`` and ``cost`` recomputed. Any mismatch against the trace
    means the bookkeeping is not a pure function of the logged data.
    """
    cfg = cfg or parse_config(trace.config)
    pspec = next(p for p in cfg.policies if p.name == trace.policy)
    setup = prepare(cfg)
    pol = make_policy(pspec, setup)
    rng = seed_streams(trace.seed)["policy"]
    hist = Histories()
    q = VirtualQueue(0.0)
    out = []
    for r in trace.records:
        hist.record_loss(r.f_t)
        cost = pspec.cost_at(r.t)
        decision, ghat = pol.decide(r.t, r.f_t, hist, q, rng)
        if decision:
            hist.record_update(r.t, r.grad_norm)
        pol.commit(r.t, decision, cost)
        hist.record_decision(decision)
        new = dataclasses.replace(r, ghat=ghat, pi_t=decision, q_t=q.q, cost=float(cost))
        q = queue_step(q, cost, decision, trace.lam_bar)
        out.append(new)
    return out


# ---------------------------------------------------------------------------
# trace I/O


def _csv_columns(records: Sequence[StepRecord], k: int) -> list[str]:
    return list(BASE_COLUMNS + EXTRA_COLUMNS) + [f"comp_{i}" for i in range(k)] + list(ORACLE_COLUMNS)


def _fmt(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def export_trace(trace: RunTrace, path: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<path>`` (CSV, exact float reprs) and ``<path>.json`` (summary and metadata)."""
    path = Path(path)
    k = len(trace.records[0].composition) if trace.records else 0
    cols = _csv_columns(trace.records, k)
    meta = {
        "policy": trace.policy,
        "seed": trace.seed,
        "lam_bar": trace.lam_bar,
        "final": trace.final,
        "config_digest": trace.config_digest,
        "stream_digest": trace.stream_digest,
        "config": trace.config,
        "summary": trace.summary,
    }
    json_path = path.with_name(path.name + ".json")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in trace.records:
                row = [r.t, r.f_t, r.pi_t, r.q_t, r.accuracy, r.drift_rate, r.delta_t, r.ghat,
                       r.cost, r.grad_norm, r.delta_actual, *r.composition,
                       *(getattr(r, c) for c in ORACLE_COLUMNS)]
                w.writerow([_fmt(v) for v in row])
        json_path.write_text(json.dumps(meta, indent=2, default=_json_default))
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc.strerror or exc}") from exc
    return path, json_path


def _json_default(o: Any) -> Any:
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def import_trace(path: str | os.PathLike) -> RunTrace:
    path = Path(path)
    json_path = path.with_name(path.name + ".json")
    try:
        meta = json.loads(json_path.read_text())
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read trace {path}: {exc.strerror or exc}") from exc
    header, body = rows[0], rows[1:]
    comp_idx = [i for i, c in enumerate(header) if c.startswith("comp_")]
    pos = {c: i for i, c in enumerate(header)}
    records = []
    for row in body:
        def g(name: str) -> float:
            return float(row[pos[name]])
        records.append(StepRecord(
            int(row[pos["t"]]), g("f_t"), int(row[pos["pi_t"]]), g("q_t"), g("accuracy"), g("drift_rate"),
            g("delta_t"), g("ghat"), g("cost"), g("grad_norm"), g("delta_actual"),
            tuple(float(row[i]) for i in comp_idx),
            **{c: g(c) for c in ORACLE_COLUMNS},
        ))
    return RunTrace(meta["config"], meta["policy"], meta["seed"], records, meta["lam_bar"], meta["final"],
                    meta["config_digest"], meta["stream_digest"], meta["summary"])


def export_plot_data(traces: Iterable[RunTrace], path: str | os.PathLike) -> Path:
    """Long-format CSV (policy, seed, t, series, value) of accuracy, update rate, queue and composition."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["policy", "seed", "t", "series", "value"])
            for tr in traces:
                cum = 0
                for r in tr.records:
                    cum += r.pi_t
                    w.writerow([tr.policy, tr.seed, r.t, "accuracy", _fmt(r.accuracy)])
                    w.writerow([tr.policy, tr.seed, r.t, "loss", _fmt(r.f_t)])
                    w.writerow([tr.policy, tr.seed, r.t, "update_rate", _fmt(cum / (r.t + 1))])
                    w.writerow([tr.policy, tr.seed, r.t, "queue", _fmt(r.q_t)])
                    for i, c in enumerate(r.composition):
                        w.writerow([tr.policy, tr.seed, r.t, f"composition_{i}", _fmt(c)])
    except OSError as exc:
        raise OSError(f"cannot write plot data to {path}: {exc.strerror or exc}") from exc
    return path


def write_summary(result: SuiteResult, path: str | os.PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(result.to_dict(), indent=2, default=_json_default))
    except OSError as exc:
        raise OSError(f"cannot write summary to {path}: {exc.strerror or exc}") from exc
    return path


__all__ = [
    "StepRecord", "RunTrace", "SuiteResult", "run_episode", "run_suite", "prepare", "make_policy",
    "export_trace", "import_trace", "export_plot_data", "write_summary", "replay_decisions",
    "seed_streams", "bound_constants",
]
