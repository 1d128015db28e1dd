"""Command-line front end: run, bounds, gradcheck, sweep, report."""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, FormatError, RelReplayError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relreplay",
        description="Rehearsal-based continual learning with meta-learned pair weights.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate one configuration")
    p_run.add_argument("config", help="path to a json experiment config")

    p_bounds = sub.add_parser("bounds", help="joint-training upper and fine-tuning lower bound")
    p_bounds.add_argument("config", help="path to a json experiment config")

    p_grad = sub.add_parser("gradcheck", help="verify the outer gradient against finite differences")
    p_grad.add_argument("--trials", type=int, default=50)
    p_grad.add_argument("--seed", type=int, default=20240)
    p_grad.add_argument("--tol", type=float, default=1e-5)

    p_sweep = sub.add_parser("sweep", help="grid of runs over config overrides")
    p_sweep.add_argument("config", help="path to a json experiment config")
    p_sweep.add_argument(
        "--grid", action="append", default=[], metavar="KEY=V1,V2,...",
        help="dotted config key and comma-separated values; repeatable",
    )

    p_report = sub.add_parser("report", help="render figures from a finished run directory")
    p_report.add_argument("run_dir", help="directory holding results.csv / trace csvs")
    p_report.add_argument("--out", default=None, help="write figures here instead of run_dir")
    return parser


def _parse_grid(entries: list[str]) -> dict[str, list]:
    grid: dict[str, list] = {}
    for entry in entries:
        if "=" not in entry:
            raise ConfigError(f"--grid expects KEY=V1,V2,... got {entry!r}")
        key, _, values = entry.partition("=")
        key = key.strip()
        if not key or not values:
            raise ConfigError(f"--grid expects KEY=V1,V2,... got {entry!r}")
        parsed = []
        for token in values.split(","):
            token = token.strip()
            try:
                parsed.append(json.loads(token))
            except json.JSONDecodeError:
                parsed.append(token)
        grid[key] = parsed
    return grid


def _cmd_run(args) -> int:
    from .harness import load_config, run_experiment

    cfg = load_config(args.config)
    result = run_experiment(cfg)
    print(f"method: {result.method}")
    print(f"output: {result.output_dir}")
    for mode, stats in result.summary["methods"][result.method].items():
        acc = stats["acc_mean"]
        bwt = stats["bwt_mean"]
        acc_s = "n/a" if acc is None else f"{acc:.4f}"
        bwt_s = "n/a" if bwt is None else f"{bwt:+.4f}"
        print(f"  {mode}: acc {acc_s}  bwt {bwt_s}")
    for err in result.errors:
        print(f"  seed {err['seed']} failed: {err['error']}", file=sys.stderr)
    return 1 if result.errors else 0


def _cmd_bounds(args) -> int:
    from .harness import load_config, run_bounds

    cfg = load_config(args.config)
    out = run_bounds(cfg)
    for bound in ("upper", "lower"):
        for mode, stats in out[bound].items():
            print(f"{bound} {mode}: acc {stats['mean']:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_gradcheck

    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    report = run_gradcheck(trials=args.trials, seed=args.seed, tol=args.tol)
    print(format_report(report))
    return 0 if report.passed else 1


def _cmd_sweep(args) -> int:
    from .harness import run_sweep

    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    grid = _parse_grid(args.grid)
    points = run_sweep(raw, grid)
    for name in sorted(points):
        print(name)
    return 0


def _cmd_report(args) -> int:
    from .report import render_run_figures

    for path in render_run_figures(args.run_dir, args.out):
        print(path)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "bounds": _cmd_bounds,
        "gradcheck": _cmd_gradcheck,
        "sweep": _cmd_sweep,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RelReplayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
