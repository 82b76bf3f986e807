"""Command-line entry point: ``gradfree {run,verify,rates,bounds}``.

Exit status: 0 on success, 1 on invalid input, 2 when ``verify`` finds a
failing check.
"""

from __future__ import annotations

import argparse
import json
import sys

from .analysis import BoundParams, bound_A, bound_B, fit_rate
from .harness import SpecError, load_spec, run_experiment
from .traceio import read_trace_csv

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def _window(text: str):
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like k_lo:k_hi, got {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gradfree", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every combination of an experiment file")
    run.add_argument("spec", help="INI experiment file")
    run.add_argument("--output", help="override the output directory")

    ver = sub.add_parser("verify", help="run the invariant checks")
    level = ver.add_mutually_exclusive_group()
    level.add_argument("--fast", dest="level", action="store_const", const="fast")
    level.add_argument("--full", dest="level", action="store_const", const="full")
    ver.set_defaults(level="fast")

    rates = sub.add_parser("rates", help="fit a power law to a trace CSV")
    rates.add_argument("csv")
    rates.add_argument("--window", type=_window, help="k_lo:k_hi (default: last decade)")
    rates.add_argument("--column", default="mean_gap", choices=("mean_gap", "mean_grad_sq", "var_mk"))

    bounds = sub.add_parser("bounds", help="evaluate A_k and B_k for a Robbins-Monro schedule")
    bounds.add_argument("--beta", type=float, required=True)
    bounds.add_argument("--sigma", type=float, required=True)
    bounds.add_argument("--l", type=float, required=True)
    bounds.add_argument("--k", type=int, required=True)
    bounds.add_argument("--rate-divisor", type=int, default=1, choices=(1, 2))
    return ap


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        if args.command == "run":
            report = run_experiment(load_spec(args.spec, args.output))
            for entry in report["combinations"]:
                slope = entry.get("rate_fit", {}).get("slope")
                extra = f" slope={slope:.3f}" if isinstance(slope, float) else ""
                print(f"{entry['name']}: {entry['status']}{extra}")
            return EXIT_OK
        if args.command == "verify":
            from .checks import verify_suite

            report = verify_suite(args.level)
            for line in report.lines():
                print(line)
            print(f"{len(report.results) - len(report.failures())}/{len(report.results)} checks passed")
            return EXIT_OK if report.passed else EXIT_FAILED
        if args.command == "rates":
            fit = fit_rate(read_trace_csv(args.csv), args.window, args.column)
            print(json.dumps(fit.as_dict(), indent=2))
            return EXIT_OK
        if args.command == "bounds":
            params = BoundParams(args.beta, args.sigma, args.l, args.k, args.rate_divisor)
            print(json.dumps({"k": args.k, "A_k": bound_A(params), "B_k": bound_B(params)}, indent=2))
            return EXIT_OK
    except (SpecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
