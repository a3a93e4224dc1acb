"""``safe-mppi`` command line: validate, run, compare and reproduce.

Exit codes: 0 success, 1 acceptance failure, 2 validation error, 3 diverged run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import EXPERIMENTS
from .mppi import samples_override
from .simkit import (
    RolloutDumper,
    ScenarioError,
    evaluate_metrics,
    load_scenario,
    run_closed_loop,
    write_metrics_json,
    write_metrics_table,
    write_svg,
    write_trace_csv,
)

EXIT_OK, EXIT_ACCEPTANCE, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3
EMIT_CHOICES = ("trace", "metrics", "svg", "sampled_rollouts")
DEFAULT_EMIT = ("trace", "metrics")


class UsageError(Exception):
    pass


def _err(message: str) -> None:
    print(f"safe-mppi: error: {message}", file=sys.stderr)


def _parse_seeds(text: str) -> list:
    """'3', '0,2,5' or '0-9' (inclusive)."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def _seeds(args) -> list:
    if args.seeds is not None:
        return _parse_seeds(args.seeds)
    return [args.seed]


def _emits(args) -> set:
    if not args.emit:
        return set(DEFAULT_EMIT)
    out = set()
    for item in args.emit:
        for flag in item.split(","):
            flag = flag.strip()
            if flag not in EMIT_CHOICES:
                raise UsageError(f"unknown --emit value {flag!r}; choose from {', '.join(EMIT_CHOICES)}")
            out.add(flag)
    return out


def _load(path):
    sc = load_scenario(path)
    if sc.planner is not None:
        samples = samples_override(sc.planner.samples)
        if samples != sc.planner.samples:
            sc = sc.with_overrides(planner__samples=samples)
    return sc


def _run_one(sc, seed, out: Path, emit: set, workers) -> bool:
    out.mkdir(parents=True, exist_ok=True)
    sink = None
    if "sampled_rollouts" in emit:
        if sc.planner is None:
            raise UsageError("--emit sampled_rollouts needs a scenario with a planner")
        sink = RolloutDumper(out / "rollouts")
    trace = run_closed_loop(sc, seed=seed, workers=workers, rollout_sink=sink)
    if "trace" in emit:
        write_trace_csv(trace, out / "trace.csv")
    if "metrics" in emit:
        write_metrics_json(evaluate_metrics(trace, sc), out / "metrics.json")
    if "svg" in emit:
        write_svg(sc, [trace], out / "plot.svg", labels=[sc.name])
    if trace.diverged:
        _err(f"run diverged (seed {seed}); partial trace written to {out}")
    return not trace.diverged


def cmd_validate(args) -> int:
    for path in args.scenario:
        sc = _load(path)
        print(f"{path}: ok ({sc.name}, model {sc.model_id}, {sc.steps} steps)")
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _load(args.scenario)
    emit = _emits(args)
    seeds = _seeds(args)
    out = Path(args.out)
    ok = True
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        ok &= _run_one(sc, seed, target, emit, args.workers)
    return EXIT_OK if ok else EXIT_DIVERGED


def cmd_compare(args) -> int:
    scenarios = [_load(p) for p in args.scenario]
    first = scenarios[0]
    for sc in scenarios[1:]:
        if (sc.model.n, sc.model.m) != (first.model.n, first.model.m):
            raise ScenarioError(f"scenario {sc.name!r} has model dims {(sc.model.n, sc.model.m)}, "
                                f"{first.name!r} has {(first.model.n, first.model.m)}")
    seeds = _seeds(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, overlay, labels = [], [], []
    diverged = False
    for sc in scenarios:
        for seed in seeds:
            trace = run_closed_loop(sc, seed=seed, workers=args.workers)
            diverged |= trace.diverged
            rows.append({"method": sc.name, "seed": int(seed), **evaluate_metrics(trace, sc).flat()})
            if seed == seeds[0]:
                overlay.append(trace)
                labels.append(sc.name)
    write_metrics_table(rows, out / "metrics.csv")
    write_svg(first, overlay, out / "compare.svg", labels=labels)
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_reproduce(args) -> int:
    if args.experiment not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    kwargs = {"workers": args.workers, "progress": print}
    if args.seeds is not None:
        kwargs["seeds"] = _parse_seeds(args.seeds)
    report = EXPERIMENTS[args.experiment](**kwargs)
    for check in report.checks:
        print(check.line())
    print(f"wall time {report.wall_time:.1f} s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_table([{k: v for k, v in r.items() if k != "line"} for r in report.rows],
                            out / "metrics.csv")
    return EXIT_OK if report.passed else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safe-mppi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi_scenario=False):
        if multi_scenario:
            p.add_argument("--scenario", nargs="+", required=True, help="scenario JSON file(s)")
        else:
            p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, default=0, help="single seed (default 0)")
        p.add_argument("--seeds", help="seed list: '0-9' or '1,4,7'; overrides --seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--workers", type=int, default=None, help="MPPI rollout threads")

    p = sub.add_parser("validate", help="check scenario files without simulating")
    p.add_argument("--scenario", nargs="+", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="simulate one scenario")
    common(p)
    p.add_argument("--emit", action="append",
                   help=f"outputs to write, comma separated or repeated: {', '.join(EMIT_CHOICES)} "
                        f"(default {','.join(DEFAULT_EMIT)})")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several scenarios on the same seeds")
    common(p, multi_scenario=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("reproduce", help="run a packaged study and report pass/fail")
    p.add_argument("experiment", help=f"one of: {', '.join(EXPERIMENTS)}")
    p.add_argument("--seeds", help="seed list (default: the study's own)")
    p.add_argument("--out", default=None, help="optional directory for metrics.csv")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ScenarioError, UsageError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
