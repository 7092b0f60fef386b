"""Command-line entry points: run one experiment spec, sweep an axis, or
render the Markdown report for a finished run.

Exit codes: 0 success, 2 spec/usage validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .harness import SWEEP_AXES, SpecError, load_experiment_spec, report, run_experiment, sweep


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otfilter",
                                     description="Filtering experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment spec")
    p_run.add_argument("--config", required=True, help="path to the JSON experiment spec")
    p_run.add_argument("--out", default=None, help="output directory (overrides the spec)")
    p_run.add_argument("--seed", type=int, default=None,
                       help="run only this seed (overrides the spec's list)")

    p_sweep = sub.add_parser("sweep", help="run a spec across one axis")
    p_sweep.add_argument("--config", required=True, help="path to the JSON experiment spec")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated integer axis values")
    p_sweep.add_argument("--out", default=None, help="output directory (overrides the spec)")

    p_report = sub.add_parser("report", help="write report.md for a finished run")
    p_report.add_argument("--manifest", required=True, help="path to a run manifest.json")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            spec = load_experiment_spec(args.config)
            if args.seed is not None:
                spec = dataclasses.replace(spec, seeds=(args.seed,))
            manifest = run_experiment(spec, out_dir=args.out)
            out_dir = args.out if args.out is not None else spec.out_dir
            print(f"wrote {out_dir}/manifest.json")
            if manifest["errors"]:
                for err in manifest["errors"]:
                    print(f"cell failed: method={err['method']} seed={err['seed']}: "
                          f"{err['error']}", file=sys.stderr)
                return 1
            return 0
        if args.command == "sweep":
            try:
                values = [int(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                print("--values must be a comma-separated list of integers", file=sys.stderr)
                return 2
            spec = load_experiment_spec(args.config)
            manifest = sweep(spec, args.axis, values, out_dir=args.out)
            out_dir = args.out if args.out is not None else spec.out_dir
            print(f"wrote {out_dir}/sweep.csv")
            failed = [c for c in manifest["cells"] if c["errors"]]
            if failed:
                for cell in failed:
                    print(f"sweep cell {cell['dir']} had failures: {cell['errors']}",
                          file=sys.stderr)
                return 1
            return 0
        if args.command == "report":
            print(report(args.manifest), end="")
            return 0
        parser.error(f"unknown command {args.command!r}")
        return 2
    except SpecError as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
