"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 bound violation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from pathlib import Path
from typing import Sequence

from . import harness
from .config import ConfigError, RunConfig, apply_overrides, parse_config, read_raw_config
from .drift_env import schedule_composition

EXIT_OK, EXIT_CONFIG, EXIT_BOUND, EXIT_IO = 0, 2, 3, 4
OUTPUT_ENV = "RCCDA_OUTPUT_DIR"


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and output_dir)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. policy.v_weight=10 (repeatable)")
    common.add_argument("--parallel", type=int, default=1, help="concurrent episodes")
    common.add_argument("--seed-offset", type=int, default=0, help="add K to every seed")

    p = argparse.ArgumentParser(prog="rccda", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("run", parents=[common], help="run every policy and seed, write traces and a summary")
    sw = sub.add_parser("sweep", parents=[common], help="cartesian product over override values")
    sw.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                    help="values to sweep for one dotted key (repeatable)")
    sub.add_parser("verify", parents=[common], help="run with oracle recording and check every bound")
    sub.add_parser("preview-schedule", parents=[common], help="print drift rate, drift size and composition")
    return p


def _load(args: argparse.Namespace, extra: Sequence[str] = ()) -> RunConfig:
    raw = apply_overrides(read_raw_config(args.config), [*args.overrides, *extra])
    if args.seed_offset:
        seeds = raw.get("seeds", [0])
        seeds = [seeds] if isinstance(seeds, int) else seeds
        if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds", "must be a list of integers")
        raw["seeds"] = [s + args.seed_offset for s in seeds]
    return parse_config(raw)


def _out_dir(args: argparse.Namespace, cfg: RunConfig) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def _write_suite(result: harness.SuiteResult, out: Path) -> None:
    for (policy, seed), tr in sorted(result.traces.items()):
        harness.export_trace(tr, out / "traces" / f"{policy}_seed{seed}.csv")
    harness.export_plot_data([tr for _, tr in sorted(result.traces.items())], out / "plot_data.csv")
    harness.write_summary(result, out / "summary.json")


def _print_table(rows: list[dict]) -> None:
    for row in rows:
        acc = f"  acc {row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}" if "accuracy_mean" in row else ""
        print(f"{row['policy']:<20} [{row['schedule']}] rate {row['update_rate_mean']:.4f} "
              f"+- {row['update_rate_std']:.4f}{acc}  loss {row['loss_mean']:.4f}")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    result = harness.run_suite(cfg, parallel=args.parallel)
    out = _out_dir(args, cfg)
    _write_suite(result, out)
    _print_table(result.table)
    print(f"wrote {out}")
    return EXIT_OK


def _grid(specs: Sequence[str]) -> list[list[str]]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(spec, "grid entries look like key=v1,v2")
        key, vals = spec.split("=", 1)
        axes.append([f"{key}={v}" for v in vals.split(",") if v != ""])
    return [list(p) for p in itertools.product(*axes)] if axes else [[]]


def cmd_sweep(args: argparse.Namespace) -> int:
    points = _grid(args.grid)
    base = _load(args)
    out = _out_dir(args, base)
    rows = []
    for i, point in enumerate(points):
        cfg = _load(args, point)
        result = harness.run_suite(cfg, parallel=args.parallel)
        _write_suite(result, out / f"point_{i:03d}")
        for row in result.table:
            rows.append({"point": i, **{kv.split("=", 1)[0]: kv.split("=", 1)[1] for kv in point}, **row})
        print(f"point {i}: {' '.join(point) or '(base)'}")
        _print_table(result.table)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    try:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "sweep.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, keys)
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {out / 'sweep.csv'}: {exc.strerror or exc}") from exc
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _load(args, ["oracle_mode=true"])
    result = harness.run_suite(cfg, parallel=args.parallel)
    out = _out_dir(args, cfg)
    _write_suite(result, out)
    print(f"{'bound':<44} {'lhs':>14} {'rhs':>14} {'slack':>14}  ok")
    for r in result.reports:
        print(f"{r.name:<44} {r.lhs:>14.6g} {r.rhs:>14.6g} {r.slack:>14.6g}  {'yes' if r.satisfied else 'NO'}")
    bad = [r.name for r in result.reports if not r.satisfied]
    if bad:
        print("violated: " + ", ".join(bad), file=sys.stderr)
        return EXIT_BOUND
    return EXIT_OK


def cmd_preview_schedule(args: argparse.Namespace) -> int:
    cfg = _load(args)
    sched, k = cfg.schedule, cfg.data.num_domains
    comp = schedule_composition(sched, k, cfg.data.pool_size, cfg.data.source_domain)
    delta = harness.nominal_delta_series(cfg)
    rates, incoming = sched.rate_series(), sched.incoming_series()
    header = ["t", "rate", "incoming", "delta"] + [f"comp_{i}" for i in range(k)]
    rows = [[t, repr(float(rates[t])), int(incoming[t]), repr(float(delta[t])),
             *(repr(float(v)) for v in comp[t])] for t in range(sched.horizon)]
    target = args.out or os.environ.get(OUTPUT_ENV)
    if target:
        path = Path(target) / "schedule.csv"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                csv.writer(fh).writerows([header, *rows])
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
        print(f"wrote {path} ({len(rows)} rows)")
    else:
        w = csv.writer(sys.stdout)
        w.writerows([header, *rows])
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "preview-schedule": cmd_preview_schedule}


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.parallel < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
