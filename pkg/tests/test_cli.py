import csv
import io
import json

import pytest
import yaml
from conftest import QUAD, SMALL, merge

from rccda.cli import EXIT_BOUND, EXIT_CONFIG, EXIT_IO, EXIT_OK, OUTPUT_ENV, main


@pytest.fixture
def small_yaml(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(merge(SMALL, horizon=50, policies=SMALL["policies"][:2])))
    return p


@pytest.fixture
def quad_yaml(tmp_path):
    p = tmp_path / "quad.yaml"
    p.write_text(yaml.safe_dump(QUAD))
    return p


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def test_run_writes_outputs(small_yaml, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(small_yaml), "--out", str(out)]) == EXIT_OK
    for name in ("rccda_seed0.csv", "rccda_seed1.csv", "uniform_seed0.csv", "uniform_seed1.csv"):
        assert (out / "traces" / name).exists() and (out / "traces" / (name + ".json")).exists()
    assert (out / "plot_data.csv").exists()
    s = _summary(out)
    assert {r["policy"] for r in s["table"]} == {"rccda", "uniform"}
    assert "uniform" in capsys.readouterr().out


def test_run_is_idempotent(small_yaml, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(small_yaml), "--out", str(a)]) == EXIT_OK
    assert main(["run", "--config", str(small_yaml), "--out", str(b), "--parallel", "2"]) == EXIT_OK
    for f in ("summary.json", "plot_data.csv", "traces/rccda_seed1.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_malformed_config_exit_2_names_field(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(merge(SMALL, learner__alpah=0.1)))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "learner.alpah" in capsys.readouterr().err


def test_yaml_syntax_error_exit_2_with_line(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("horizon: 10\nseeds: [0, 1\n")
    assert main(["run", "--config", str(p)]) == EXIT_CONFIG
    assert "line" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.yaml")]) == EXIT_CONFIG


def test_bad_override_exit_2(small_yaml, tmp_path):
    assert main(["run", "--config", str(small_yaml), "--out", str(tmp_path), "--set", "learner.alpha=-1"]) == EXIT_CONFIG
    assert main(["run", "--config", str(small_yaml), "--parallel", "0"]) == EXIT_CONFIG


def test_overrides_and_seed_offset_reach_summary(small_yaml, tmp_path):
    out = tmp_path / "o"
    rc = main(["run", "--config", str(small_yaml), "--out", str(out), "--set", "seeds=[7]", "--seed-offset", "3"])
    assert rc == EXIT_OK
    s = _summary(out)
    assert set(s["stream_digests"]) == {"rccda/10", "uniform/10"}
    assert all(r["seeds"] == 1 for r in s["table"])


def test_output_dir_from_environment(small_yaml, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["run", "--config", str(small_yaml)]) == EXIT_OK
    assert (tmp_path / "env" / "summary.json").exists()
    # --out wins over the environment
    assert main(["run", "--config", str(small_yaml), "--out", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "flag" / "summary.json").exists()


def test_unwritable_output_exit_4(small_yaml, tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["run", "--config", str(small_yaml), "--out", str(blocker / "x")]) == EXIT_IO
    assert "blocker" in capsys.readouterr().err


def test_verify_quadratic_passes(quad_yaml, tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--config", str(quad_yaml), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "rccda:convergence" in text and "NO" not in text
    assert _summary(out)["all_satisfied"] is True


def _convergence(out):
    return next(b for b in _summary(out)["bounds"] if b["name"] == "rccda:convergence")


def test_verify_smaller_smoothness_shrinks_rhs(quad_yaml, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "--config", str(quad_yaml), "--out", str(a)]) == EXIT_OK
    rc = main(["verify", "--config", str(quad_yaml), "--out", str(b), "--set", "analysis.l_smooth=0.5"])
    assert rc in (EXIT_OK, EXIT_BOUND)
    assert _convergence(b)["rhs"] < _convergence(a)["rhs"]


def test_verify_detects_corrupted_constant(quad_yaml, tmp_path, capsys):
    # claiming an update every step overstates progress and breaks the bound
    out = tmp_path / "bad"
    rc = main(["verify", "--config", str(quad_yaml), "--out", str(out), "--set", "analysis.p_min=1.0"])
    assert rc == EXIT_BOUND
    assert "rccda:convergence" in capsys.readouterr().err
    assert _summary(out)["all_satisfied"] is False


def test_verify_classifier_without_drift(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(merge(SMALL, horizon=40, seeds=[0], schedule={"kind": "constant"},
                                      policies=SMALL["policies"][:1])))
    out = tmp_path / "o"
    assert main(["verify", "--config", str(p), "--out", str(out)]) == EXIT_OK
    pins = next(b for b in _summary(out)["bounds"] if b["name"] == "rccda:pinsker_all_steps")
    assert pins["lhs"] == 0 and pins["rhs"] == 0 and pins["details"]["drift_steps"] == 40


def test_preview_schedule_stdout(tmp_path, capsys):
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump({"horizon": 200, "data": {"num_domains": 3},
                                 "schedule": {"kind": "burst", "event_times": [50, 150]}}))
    assert main(["preview-schedule", "--config", str(p)]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 200
    assert [int(r["t"]) for r in rows if float(r["rate"]) > 0] == [50, 150]
    for r in rows:
        assert sum(float(r[f"comp_{i}"]) for i in range(3)) == pytest.approx(1.0, abs=1e-12)
    assert float(rows[50]["delta"]) > 0 and float(rows[51]["delta"]) == 0


def test_preview_schedule_to_directory(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump({"horizon": 30, "schedule": {"kind": "wave"}}))
    assert main(["preview-schedule", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert len((tmp_path / "o" / "schedule.csv").read_text().splitlines()) == 31


def test_sweep(small_yaml, tmp_path):
    out = tmp_path / "sw"
    rc = main(["sweep", "--config", str(small_yaml), "--out", str(out),
               "--grid", "policies.0.v_weight=1,10", "--grid", "seeds=[0],[1]"])
    assert rc == EXIT_OK
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert len(rows) == 4 * 2
    assert {r["policies.0.v_weight"] for r in rows} == {"1", "10"}
    assert (out / "point_003" / "summary.json").exists()


def test_sweep_bad_grid(small_yaml, tmp_path):
    assert main(["sweep", "--config", str(small_yaml), "--out", str(tmp_path), "--grid", "novalue"]) == EXIT_CONFIG
