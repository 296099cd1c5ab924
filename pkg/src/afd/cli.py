"""Command-line entry point: single episodes, Monte Carlo tables, presets, merging.

Exit codes: 0 success, 2 invalid input, 3 infeasible OCP, 4 numerical failure.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import config as cfgmod
from .errors import AfdError, InfeasibleOcp, ParseError, ValidationError
from .io import atomic_write_text, fmt
from .simulator import (RNG_NAME, EpisodeOutcome, run_episode, run_monte_carlo,
                        summarize)
from .tube_mpc import Strategy

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4
U64 = 2 ** 64
METRICS = ("detection_time", "detection_rate", "final_volume")


def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < U64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = _u64(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _csv_text(rows: List[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    return fmt(x)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(args, spec) -> Path:
    return Path(args.out if args.out is not None else spec.output_dir)


# ---------------------------------------------------------------- run

def run_csv(rec, n: int, m: int) -> str:
    header = (["step"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
              + [f"v{i + 1}" for i in range(m)] + ["beta", "volume", "fault_active", "detected", "ocp_status"])
    rows = [header]
    for k in range(rec.n_steps):
        rows.append([str(k)] + [fmt(a) for a in rec.x[k]] + [fmt(a) for a in rec.u[k]]
                    + [fmt(a) for a in rec.v[k]] + [fmt(rec.beta[k]), fmt(rec.volume[k]),
                                                   str(int(rec.fault_flag[k])), str(int(rec.detected[k])),
                                                   rec.ocp_status[k]])
    return _csv_text(rows)


def cmd_run(args) -> int:
    spec = cfgmod.load_config(args.config)
    for msg in cfgmod.fault_warnings(spec):
        print(f"warning: {msg}", file=sys.stderr)
    strategy = Strategy(args.strategy).value
    plant = spec.plant
    rec = run_episode(plant, strategy, args.seed)
    out = _out_dir(args, spec)
    stem = f"run_{strategy}_{args.seed}"
    atomic_write_text(out / f"{stem}.csv", run_csv(rec, plant.n, plant.m))
    meta = {
        "config_hash": cfgmod.config_hash(spec),
        "rng": RNG_NAME,
        "seed": args.seed,
        "strategy": strategy,
        "status": rec.status,
        "truncated_at": rec.truncated_at,
        "shutdown": bool(any(rec.shutdown)),
        "detection_events": [ev.to_dict() for ev in rec.detection_events],
        "wall_time_s": rec.wall_time,
    }
    atomic_write_text(out / f"{stem}.json", _json(meta))
    if rec.status != "Completed":
        print(f"episode stopped at step {rec.truncated_at}: {rec.status}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ---------------------------------------------------------------- mc

def summary_csv(summary) -> str:
    rows = [["fault", "metric"] + list(summary.strategies)]
    for f in range(summary.n_faults):
        for metric in METRICS:
            table = getattr(summary, metric)
            rows.append([f"F{f + 1}", metric] + [fmt(table[(f, s)]) for s in summary.strategies])
    return _csv_text(rows)


def runs_csv(outcomes: List[EpisodeOutcome], n_faults: int) -> str:
    header = ["strategy", "seed", "status", "steps_run", "tracking_cost", "violations"]
    for f in range(n_faults):
        header += [f"F{f + 1}_detected", f"F{f + 1}_time", f"F{f + 1}_final_volume"]
    rows = [header]
    for o in outcomes:
        row = [o.strategy, str(o.seed), o.status, str(o.steps_run), fmt(o.tracking_cost), str(o.violations)]
        for f in range(n_faults):
            row += [_num(o.detected[f]), fmt(o.detection_time[f]), fmt(o.final_volume[f])]
        rows.append(row)
    return _csv_text(rows)


def _summary_meta(spec, summary, extra) -> dict:
    meta = {
        "config_hash": cfgmod.config_hash(spec),
        "rng": RNG_NAME,
        "strategies": list(summary.strategies),
        "run_count": summary.run_count,
        "failures": summary.failures,
        "violations": summary.violations,
        "tracking_cost": {s: fmt(v) for s, v in summary.tracking_cost.items()},
    }
    meta.update(extra)
    return meta


def _write_mc(out: Path, spec, summary, extra) -> None:
    atomic_write_text(out / "summary.csv", summary_csv(summary))
    atomic_write_text(out / "runs.csv", runs_csv(summary.outcomes, summary.n_faults))
    atomic_write_text(out / "summary.json", _json(_summary_meta(spec, summary, extra)))
    # the config itself travels with the results so merge can rebuild summaries
    atomic_write_text(out / "config.json", cfgmod.dumps(spec) + "\n")


def cmd_mc(args) -> int:
    spec = cfgmod.load_config(args.config)
    for msg in cfgmod.fault_warnings(spec):
        print(f"warning: {msg}", file=sys.stderr)
    n_runs = args.runs if args.runs is not None else spec.n_runs
    base = args.seed if args.seed is not None else spec.plant.seed
    jobs = args.jobs if args.jobs is not None else int(os.environ.get("AFD_JOBS", "1") or 1)
    t0 = time.perf_counter()
    summary = run_monte_carlo(spec.plant, spec.strategies, n_runs=n_runs, jobs=jobs, base_seed=base)
    wall = time.perf_counter() - t0
    _write_mc(_out_dir(args, spec), spec, summary,
              {"base_seed": base, "n_runs": n_runs, "wall_time_s": wall})
    total = sum(summary.run_count.values())
    if total and sum(summary.failures.values()) == total:
        print("every episode failed", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ---------------------------------------------------------------- preset / merge

def cmd_preset(args) -> int:
    if args.name not in cfgmod.PRESETS:
        raise ValidationError("preset", f"unknown preset {args.name!r}")
    cfgmod.save(cfgmod.PRESETS[args.name](), args.out)
    return EXIT_OK


def _read_outcomes(path: Path, n_faults: int) -> List[EpisodeOutcome]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(EpisodeOutcome(
                strategy=row["strategy"], seed=int(row["seed"]), status=row["status"],
                detected=[row[f"F{f + 1}_detected"] == "1" for f in range(n_faults)],
                detection_time=[float(row[f"F{f + 1}_time"]) for f in range(n_faults)],
                final_volume=[float(row[f"F{f + 1}_final_volume"]) for f in range(n_faults)],
                tracking_cost=float(row["tracking_cost"]), violations=int(row["violations"]),
                steps_run=int(row["steps_run"]), wall_time=math.nan))
    return out


def cmd_merge(args) -> int:
    dirs = [Path(d) for d in args.dirs]
    metas = []
    for d in dirs:
        with open(d / "summary.json", encoding="utf-8") as fh:
            metas.append(json.load(fh))
    hashes = {m["config_hash"] for m in metas}
    if len(hashes) != 1:
        raise ValidationError("merge", "inputs come from different configurations")
    spec = cfgmod.load_config(dirs[0] / "config.json")
    if cfgmod.config_hash(spec) not in hashes:
        raise ValidationError("merge", "config.json does not match its summary hash")
    n_f = len(spec.plant.fault_events)
    seen, outcomes = set(), []
    for d in dirs:
        for o in _read_outcomes(d / "runs.csv", n_f):
            key = (o.strategy, o.seed)
            if key in seen:
                raise ValidationError("merge", f"episode {key} appears twice")
            seen.add(key)
            outcomes.append(o)
    strategies = list(dict.fromkeys(s for m in metas for s in m["strategies"]))
    outcomes.sort(key=lambda o: (strategies.index(o.strategy), o.seed))
    summary = summarize(spec.plant, outcomes, strategies)
    _write_mc(Path(args.out), spec, summary, {"merged_from": [str(d) for d in dirs]})
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afd", description="Active fault diagnosis with tube MPC.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one episode")
    r.add_argument("--config", required=True, help="JSON config file or preset name")
    r.add_argument("--strategy", required=True, choices=cfgmod.STRATEGY_NAMES)
    r.add_argument("--seed", required=True, type=_u64)
    r.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("mc", help="Monte Carlo comparison of the strategies")
    m.add_argument("--config", required=True)
    m.add_argument("--runs", type=_positive, default=None)
    m.add_argument("--seed", type=_u64, default=None)
    m.add_argument("--jobs", type=_positive, default=None, help="worker processes (fallback: AFD_JOBS)")
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_mc)

    s = sub.add_parser("preset", help="write a built-in configuration")
    s.add_argument("name", choices=sorted(cfgmod.PRESETS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preset)

    g = sub.add_parser("merge", help="combine Monte Carlo outputs of one configuration")
    g.add_argument("dirs", nargs="+")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_merge)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InfeasibleOcp as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AfdError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
