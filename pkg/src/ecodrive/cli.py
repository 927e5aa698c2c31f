"""``ecodrive`` command line: solve-dp, train, benchmark, verify, gen-scenarios, pipeline.

Exit codes: 0 success, 1 property or benchmark failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import bench, dp, verify
from . import terminal as T
from .world import WorldError

log = logging.getLogger("ecodrive")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="pipeline INI file")
    parser.add_argument("--seed", type=int, metavar="N", default=default, help="override the configured seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory (default: out)")
    parser.add_argument("--jobs", type=int, metavar="K", default=default, help="scenario-level worker processes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecodrive", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub.add_parser("gen-scenarios", parents=[common], help="write corpus and benchmark scenario files")
    sub.add_parser("solve-dp", parents=[common], help="solve the training corpus (no-jam and jam variants)")
    tr = sub.add_parser("train", parents=[common], help="fit a terminal-cost net on stored value functions")
    tr.add_argument("--variant", choices=("ag", "aw"), required=True)
    sub.add_parser("benchmark", parents=[common], help="run DP and both MPC controllers on the benchmark routes")
    ve = sub.add_parser("verify", parents=[common], help="run the property suite")
    ve.add_argument("--list", action="store_true", help="list properties without running them")
    ve.add_argument("--only", metavar="NAMES", help="comma-separated property names")
    sub.add_parser("pipeline", parents=[common], help="solve-dp, train both nets, then benchmark")
    return p


def resolve_config(args) -> bench.PipelineConfig:
    cfg = bench.load_config(args.config) if args.config else bench.PipelineConfig()
    return cfg.replace(seed=args.seed, out_dir=args.out, jobs=args.jobs)


def _benchmark(cfg) -> int:
    report, _ = bench.cmd_benchmark(cfg, log=log.info)
    sys.stdout.write(bench.report_text(report))
    return 0 if bench.benchmark_ok(report) else 1


def _solve(cfg) -> int:
    rows = bench.cmd_solve_dp(cfg, log=log.info)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.warning("%s/%s %s", r["scenario"], r["variant"], r["status"])
    return 1 if len(failed) == len(rows) else 0


def dispatch(args) -> int:
    if args.command == "verify" and args.list:
        for prop in verify.PROPERTIES:
            print(f"{prop.name}: {prop.description}")
        return 0
    cfg = resolve_config(args)
    t0 = time.perf_counter()
    if args.command == "gen-scenarios":
        for path in bench.cmd_gen_scenarios(cfg):
            print(path)
        code = 0
    elif args.command == "solve-dp":
        code = _solve(cfg)
    elif args.command == "train":
        bench.cmd_train(cfg, args.variant, log=log.info)
        code = 0
    elif args.command == "benchmark":
        code = _benchmark(cfg)
    elif args.command == "verify":
        names = set(args.only.split(",")) if args.only else None
        code = 0 if verify.run(cfg, names, log=print) else 1
    else:
        code = _solve(cfg)
        if code == 0:
            bench.cmd_train(cfg, "ag", log=log.info)
            bench.cmd_train(cfg, "aw", log=log.info)
            code = _benchmark(cfg)
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except (bench.ConfigError, WorldError, dp.DpError, T.SchemaMismatchError) as exc:
        log.error("error: %s", exc)
        return 2
    except T.TrainingError as exc:
        log.error("training failed at %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
