"""Command-line interface: ``pddsparse run`` and ``pddsparse verify``."""

from __future__ import annotations

import argparse
import sys

from .pipeline import PhaseError, RunConfig, run_pipeline
from .verify import SUITES, run_suite


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pddsparse",
        description="Probabilistic domain decomposition solver for 2D "
                    "elliptic Dirichlet problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser(
        "run", help="run the warm-up / calibration / production pipeline")
    run_p.add_argument("--config", required=True,
                       help="JSON run configuration file")
    run_p.add_argument("--phase", choices=["I", "II", "III", "all"],
                       default=None, help="phase selection (default: config)")
    run_p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: config)")
    run_p.add_argument("--seed", type=int, default=None,
                       help="base seed override")
    run_p.add_argument("--out", default=None,
                       help="artifact directory override")

    ver_p = sub.add_parser("verify", help="run oracle verification suites")
    ver_p.add_argument("--suite", required=True,
                       help=f"one of {sorted(SUITES)} or 'all'")
    return parser


def _fmt(value, digits=4):
    return "n/a" if value is None else f"{value:.{digits}g}"


def _cmd_run(args) -> int:
    try:
        config = RunConfig.from_file(args.config)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: invalid config {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.workers is not None:
        config.workers = args.workers
    if args.seed is not None:
        config.base_seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    config.validate()

    try:
        result = run_pipeline(config, phase_override=args.phase)
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    metrics = result.metrics
    print(f"interfacial unknowns: {metrics['n_interfacial']}  "
          f"(shrinkage {metrics['shrinkage']:.4f})")
    for key, label in (("phase_I", "phase I"), ("phase_III", "phase III")):
        block = metrics.get(key)
        if block is None:
            continue
        err = block["nodal_errors"]
        print(f"{label}: jobs={block['jobs']} "
              f"trajectories={block['total_trajectories']} "
              f"cond={block['condition']:.3g} "
              f"rmse={_fmt(err and err['rmse'])} "
              f"max_err={_fmt(err and err['max_abs_error'])}")
    cal = metrics.get("phase_II")
    if cal is not None:
        print(f"phase II: mean bias={cal['mean_bias']:.3g} "
              f"variance reduction={cal['mean_variance_reduction']:.3g} "
              f"min h={cal['min_h']:.3g}")
    print(f"artifacts written to {config.out_dir}")
    return 0


def _cmd_verify(args) -> int:
    try:
        checks = run_suite(args.suite)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = 0
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_verify(args)


if __name__ == "__main__":
    sys.exit(main())
