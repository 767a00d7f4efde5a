import copy

import pytest

from rccda.config import parse_config

SMALL = {
    "horizon": 60,
    "seeds": [0, 1],
    "data": {"num_domains": 3, "num_classes": 3, "feature_dim": 2, "pool_size": 60, "holdout_size": 30,
             "data_bound": 4.0},
    "schedule": {"kind": "burst", "event_times": [10, 40], "rates": [0.8, 0.5]},
    "learner": {"loss": "softmax", "alpha": 0.2, "steps_per_update": 2, "batch_size": 16, "pretrain_steps": 50},
    "policies": [
        {"kind": "rccda", "v_weight": 10.0, "cost": 1.0, "avg_cost": 0.1},
        {"kind": "uniform", "cost": 1.0, "avg_cost": 0.1},
        {"kind": "periodic", "cost": 1.0, "avg_cost": 0.1},
        {"kind": "budget_increase", "cost": 1.0, "avg_cost": 0.1},
        {"kind": "budget_threshold", "cost": 1.0, "avg_cost": 0.1},
    ],
}

QUAD = {
    "horizon": 80,
    "seeds": [0, 1, 2],
    "oracle_mode": True,
    "data": {"pool_size": 20, "holdout_size": 10},
    "schedule": {"kind": "wave"},
    "learner": {"loss": "quadratic", "alpha": 0.5, "steps_per_update": 1, "target_scale": 5.0, "init_offset": 1.0},
    "policies": [{"kind": "rccda", "v_weight": 10.0, "cost": 1.0, "avg_cost": 0.1,
                  "estimator": {"kind": "last_gradient"}}],
}


def merge(base, **over):
    raw = copy.deepcopy(base)
    for k, v in over.items():
        node = raw
        parts = k.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return raw


@pytest.fixture
def small_raw():
    return copy.deepcopy(SMALL)


@pytest.fixture
def small_cfg():
    return parse_config(SMALL)


@pytest.fixture
def quad_cfg():
    return parse_config(QUAD)


# One PASS/FAIL line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    def log(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
