"""Run configuration: YAML file -> validated, frozen dataclasses.

Every validation failure raises :class:`ConfigError` naming the dotted path
of the offending field. The schema is documented in the repository README.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .drift_env import DriftSchedule, ScheduleKind, default_schedule
from .learner import LossKind
from .policies import EstimatorKind, EstimatorSpec, ThresholdForm

POLICY_KINDS = ("rccda", "uniform", "periodic", "budget_increase", "budget_threshold", "never", "always")


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str, line: int | None = None):
        self.field = field_path
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{field_path}{where}: {message}")


@dataclass(frozen=True)
class DataConfig:
    num_domains: int = 4
    num_classes: int = 3
    feature_dim: int = 2
    separation: float = 2.0
    cov_scale: float = 0.3
    data_bound: float | None = 4.0
    pool_size: int = 200
    holdout_size: int = 100
    domain_seed: int = 0
    source_domain: int = 0
    reference_size: int = 400


@dataclass(frozen=True)
class LearnerSection:
    loss: LossKind = LossKind.SOFTMAX
    alpha: float = 0.2
    steps_per_update: int = 5
    batch_size: int | None = 32
    clamp_b: float | None = None
    pretrain_steps: int = 300
    loss_source: str = "holdout"
    holdout_batch: int | None = None
    # quadratic tracking
    target_dim: int = 2
    target_scale: float = 1.0
    init_offset: float = 0.1


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "rccda"
    v_weight: float = 1.0
    cost: float | tuple[float, ...] = 1.0
    avg_cost: float = 0.1
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    threshold_form: ThresholdForm = ThresholdForm.DERIVATION
    eta: float | None = None
    l_smooth: float | None = None
    consec_n: int = 2
    window_len: int = 10
    eps: float = 0.05
    budget_cap: float | None = None
    label: str | None = None

    @property
    def name(self) -> str:
        return self.label or self.kind

    def cost_at(self, t: int) -> float:
        return self.cost if isinstance(self.cost, float) else self.cost[t]


@dataclass(frozen=True)
class AnalysisConfig:
    p_min_floor: float = 0.01
    p_min: float | None = None
    sigma_safety: float = 1.5
    sigma_trials: int = 200
    l_smooth: float | None = None
    drift_mode: str = "sup"


@dataclass(frozen=True, eq=False)
class RunConfig:
    horizon: int
    schedule: DriftSchedule
    data: DataConfig
    learner: LearnerSection
    policies: tuple[PolicySpec, ...]
    seeds: tuple[int, ...]
    oracle_mode: bool = False
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "runs"
    raw: Mapping[str, Any] = field(default_factory=dict)

    @property
    def policy(self) -> PolicySpec:
        return self.policies[0]

    def digest(self) -> str:
        return config_digest(self.raw)


def config_digest(raw: Mapping[str, Any]) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# field readers


def _section(raw: Mapping[str, Any], key: str, path: str) -> dict[str, Any]:
    val = raw.get(key, {})
    if val is None:
        return {}
    if not isinstance(val, Mapping):
        raise ConfigError(f"{path}{key}", "must be a mapping")
    return dict(val)


def _reject_unknown(d: Mapping[str, Any], allowed: Sequence[str], path: str) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}{k}", "unknown field")


def _num(val: Any, path: str, *, integer: bool = False, positive: bool = False,
         nonneg: bool = False, optional: bool = False) -> Any:
    if val is None:
        if optional:
            return None
        raise ConfigError(path, "is required")
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(path, f"must be a number, got {val!r}")
    if integer:
        if isinstance(val, float) and not val.is_integer():
            raise ConfigError(path, f"must be an integer, got {val!r}")
        val = int(val)
    else:
        val = float(val)
        if not math.isfinite(val):
            raise ConfigError(path, "must be finite")
    if positive and not val > 0:
        raise ConfigError(path, f"must be positive, got {val!r}")
    if nonneg and val < 0:
        raise ConfigError(path, f"must be nonnegative, got {val!r}")
    return val


def _fill(cls: type, d: Mapping[str, Any], path: str, specs: Mapping[str, dict[str, Any]]) -> Any:
    _reject_unknown(d, [f.name for f in fields(cls)], path)
    kwargs = {}
    for name, opts in specs.items():
        if name in d:
            kwargs[name] = _num(d[name], f"{path}{name}", **opts)
    return kwargs


def _parse_data(d: Mapping[str, Any]) -> DataConfig:
    kw = _fill(DataConfig, d, "data.", {
        "num_domains": dict(integer=True, positive=True),
        "num_classes": dict(integer=True, positive=True),
        "feature_dim": dict(integer=True, positive=True),
        "separation": dict(positive=True),
        "cov_scale": dict(positive=True),
        "data_bound": dict(positive=True, optional=True),
        "pool_size": dict(integer=True, positive=True),
        "holdout_size": dict(integer=True, positive=True),
        "domain_seed": dict(integer=True),
        "source_domain": dict(integer=True, nonneg=True),
        "reference_size": dict(integer=True, positive=True),
    })
    cfg = DataConfig(**kw)
    if cfg.num_classes < 2:
        raise ConfigError("data.num_classes", "must be >= 2")
    if cfg.source_domain >= cfg.num_domains:
        raise ConfigError("data.source_domain", "must be < num_domains")
    return cfg


def _parse_learner(d: Mapping[str, Any]) -> LearnerSection:
    d = dict(d)
    extra = {}
    if "loss" in d:
        try:
            extra["loss"] = LossKind(d["loss"])
        except ValueError:
            raise ConfigError("learner.loss", f"must be one of {[k.value for k in LossKind]}") from None
    if "loss_source" in d:
        if d["loss_source"] not in ("holdout", "train"):
            raise ConfigError("learner.loss_source", "must be 'holdout' or 'train'")
        extra["loss_source"] = d["loss_source"]
    kw = _fill(LearnerSection, d, "learner.", {
        "alpha": dict(nonneg=True),
        "steps_per_update": dict(integer=True, positive=True),
        "batch_size": dict(integer=True, positive=True, optional=True),
        "clamp_b": dict(positive=True, optional=True),
        "pretrain_steps": dict(integer=True, nonneg=True),
        "holdout_batch": dict(integer=True, positive=True, optional=True),
        "target_dim": dict(integer=True, positive=True),
        "target_scale": dict(nonneg=True),
        "init_offset": dict(nonneg=True),
    })
    return LearnerSection(**kw, **extra)


def _parse_estimator(d: Any, path: str) -> EstimatorSpec:
    if d is None:
        return EstimatorSpec()
    if not isinstance(d, Mapping):
        raise ConfigError(path, "must be a mapping")
    _reject_unknown(d, ["kind", "k_d", "k_window", "weights", "min_fit_points"], path + ".")
    kw: dict[str, Any] = {}
    if "kind" in d:
        try:
            kw["kind"] = EstimatorKind(d["kind"])
        except ValueError:
            raise ConfigError(f"{path}.kind", f"must be one of {[k.value for k in EstimatorKind]}") from None
    if "k_d" in d:
        kw["k_d"] = _num(d["k_d"], f"{path}.k_d", nonneg=True)
    if "k_window" in d:
        kw["k_window"] = _num(d["k_window"], f"{path}.k_window", integer=True, positive=True)
    if "min_fit_points" in d:
        kw["min_fit_points"] = _num(d["min_fit_points"], f"{path}.min_fit_points", integer=True, positive=True)
    if d.get("weights") is not None:
        if not isinstance(d["weights"], Sequence):
            raise ConfigError(f"{path}.weights", "must be a list")
        kw["weights"] = tuple(_num(w, f"{path}.weights[{i}]", nonneg=True) for i, w in enumerate(d["weights"]))
    try:
        return EstimatorSpec(**kw)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _parse_policy(d: Mapping[str, Any], path: str, horizon: int) -> PolicySpec:
    d = dict(d)
    _reject_unknown(d, [f.name for f in fields(PolicySpec)], path + ".")
    kind = d.get("kind", "rccda")
    if kind not in POLICY_KINDS:
        raise ConfigError(f"{path}.kind", f"must be one of {list(POLICY_KINDS)}, got {kind!r}")
    kw: dict[str, Any] = {"kind": kind}
    for name, opts in {
        "v_weight": dict(nonneg=True),
        "avg_cost": dict(positive=True),
        "eta": dict(positive=True, optional=True),
        "l_smooth": dict(positive=True, optional=True),
        "consec_n": dict(integer=True, positive=True),
        "window_len": dict(integer=True, positive=True),
        "eps": dict(positive=True),
        "budget_cap": dict(positive=True, optional=True),
    }.items():
        if name in d:
            kw[name] = _num(d[name], f"{path}.{name}", **opts)
    if "cost" in d:
        c = d["cost"]
        if isinstance(c, Sequence) and not isinstance(c, str):
            if len(c) != horizon:
                raise ConfigError(f"{path}.cost", f"cost list must have horizon={horizon} entries")
            kw["cost"] = tuple(_num(v, f"{path}.cost[{i}]", positive=True) for i, v in enumerate(c))
        else:
            kw["cost"] = _num(c, f"{path}.cost", positive=True)
    if "threshold_form" in d:
        try:
            kw["threshold_form"] = ThresholdForm(d["threshold_form"])
        except ValueError:
            raise ConfigError(f"{path}.threshold_form",
                              f"must be one of {[f.value for f in ThresholdForm]}") from None
    if "label" in d:
        kw["label"] = str(d["label"])
    kw["estimator"] = _parse_estimator(d.get("estimator"), f"{path}.estimator")
    spec = PolicySpec(**kw)
    costs = spec.cost if isinstance(spec.cost, tuple) else (spec.cost,)
    if min(costs) <= spec.avg_cost:
        raise ConfigError(f"{path}.avg_cost", "must be strictly below every per-update cost")
    return spec


_SCHEDULE_FIELDS = ("kind", "event_times", "rates", "period", "duration", "num_events",
                    "rate_range", "incoming_domains", "seed")


def _parse_schedule(d: Mapping[str, Any], horizon: int, num_domains: int) -> DriftSchedule:
    _reject_unknown(d, _SCHEDULE_FIELDS, "schedule.")
    kind = d.get("kind", "constant")
    try:
        kind = ScheduleKind(kind)
    except ValueError:
        raise ConfigError("schedule.kind", f"must be one of {[k.value for k in ScheduleKind]}") from None
    base = default_schedule(kind, horizon, num_domains, seed=int(d.get("seed", 0)))
    kw = {f: getattr(base, f) for f in _SCHEDULE_FIELDS}
    kw["horizon"] = horizon
    for key in _SCHEDULE_FIELDS[1:]:
        if key in d and d[key] is not None:
            v = d[key]
            kw[key] = tuple(v) if isinstance(v, list) else v
    if kind is ScheduleKind.BURST and "event_times" in d and "rates" not in d:
        kw["rates"] = (base.rates[0] if base.rates else 0.8,) * len(kw["event_times"])
    for dom in kw["incoming_domains"]:
        if not 0 <= int(dom) < num_domains:
            raise ConfigError("schedule.incoming_domains", f"domain {dom} outside [0, {num_domains})")
    try:
        return DriftSchedule(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError("schedule", str(exc)) from None


def _parse_analysis(d: Mapping[str, Any]) -> AnalysisConfig:
    extra = {}
    if "drift_mode" in d:
        if d["drift_mode"] not in ("sup", "mean"):
            raise ConfigError("analysis.drift_mode", "must be 'sup' or 'mean'")
        extra["drift_mode"] = d["drift_mode"]
    kw = _fill(AnalysisConfig, d, "analysis.", {
        "p_min_floor": dict(positive=True),
        "p_min": dict(positive=True, optional=True),
        "sigma_safety": dict(positive=True),
        "sigma_trials": dict(integer=True, positive=True),
        "l_smooth": dict(positive=True, optional=True),
    })
    return AnalysisConfig(**kw, **extra)


_TOP_LEVEL = ("horizon", "seeds", "oracle_mode", "data", "schedule", "learner", "policy", "policies",
              "analysis", "output_dir")


def parse_config(raw: Mapping[str, Any]) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>", "configuration must be a mapping")
    raw = copy.deepcopy(dict(raw))
    _reject_unknown(raw, _TOP_LEVEL, "")
    horizon = _num(raw.get("horizon", 250), "horizon", integer=True, positive=True)
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, Sequence) or not seeds:
        raise ConfigError("seeds", "must be a non-empty list of integers")
    seeds = tuple(_num(s, f"seeds[{i}]", integer=True) for i, s in enumerate(seeds))
    oracle = raw.get("oracle_mode", False)
    if not isinstance(oracle, bool):
        raise ConfigError("oracle_mode", "must be true or false")
    data = _parse_data(_section(raw, "data", ""))
    schedule = _parse_schedule(_section(raw, "schedule", ""), horizon, data.num_domains)
    learner = _parse_learner(_section(raw, "learner", ""))
    if "policies" in raw and "policy" in raw:
        raise ConfigError("policies", "give either 'policy' or 'policies', not both")
    if "policies" in raw:
        plist = raw["policies"]
        if not isinstance(plist, Sequence) or not plist:
            raise ConfigError("policies", "must be a non-empty list")
        policies = tuple(
            _parse_policy(p if isinstance(p, Mapping) else {"kind": p}, f"policies[{i}]", horizon)
            for i, p in enumerate(plist)
        )
    else:
        policies = (_parse_policy(_section(raw, "policy", ""), "policy", horizon),)
    analysis = _parse_analysis(_section(raw, "analysis", ""))
    output_dir = str(raw.get("output_dir", "runs"))
    if learner.loss is LossKind.SOFTMAX and learner.batch_size is not None and learner.batch_size > data.pool_size:
        raise ConfigError("learner.batch_size", "must not exceed data.pool_size")
    return RunConfig(horizon, schedule, data, learner, policies, seeds, oracle, analysis, output_dir, raw)


def _set_dotted(raw: dict[str, Any], key: str, value: Any) -> None:
    """Set ``a.b.c``; integer parts index into lists (``policies.0.v_weight``)."""
    parts = key.split(".")
    node: Any = raw
    for depth, p in enumerate(parts):
        last = depth == len(parts) - 1
        if isinstance(node, list):
            if not p.isdigit() or int(p) >= len(node):
                raise ConfigError(key, f"list index {p!r} out of range")
            p = int(p)
            if last:
                node[p] = value
                return
            node = node[p]
            continue
        if not isinstance(node, dict):
            raise ConfigError(key, f"cannot descend into non-mapping field {parts[depth - 1]!r}")
        if last:
            node[p] = value
            return
        if node.get(p) is None:
            node[p] = {}
        node = node[p]


def apply_overrides(raw: Mapping[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars/lists."""
    out = copy.deepcopy(dict(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(item, "empty override key")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(key, f"cannot parse override value: {exc}") from None
        _set_dotted(out, key, value)
    return out


def read_raw_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise ConfigError(str(path), f"YAML syntax error: {exc.problem}", line) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    return raw


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> RunConfig:
    return parse_config(apply_overrides(read_raw_config(path), overrides))
