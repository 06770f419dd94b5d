"""Command-line entry point: ``ffheflow --case case.m --devices devices.yaml``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import FFHEError
from .ffhe import SolveOptions
from .netmodel import builtin_case, load_case
from .runner import RunOptions, builtin_scenarios, compare_solvers, emit_report, load_devices, run_powerflow

EXIT_OK, EXIT_DIVERGED, EXIT_INPUT, EXIT_OSCILLATION = 0, 2, 3, 4


def _germ(text: str):
    if text == "flat" or text.startswith("nr:"):
        if text.startswith("nr:") and not text[3:].isdigit():
            raise argparse.ArgumentTypeError("germ must be 'flat' or 'nr:K'")
        return text
    raise argparse.ArgumentTypeError("germ must be 'flat' or 'nr:K'")


def _branches(text: str):
    out = []
    for item in text.split(","):
        a, sep, b = item.strip().partition("-")
        if not sep:
            raise argparse.ArgumentTypeError(f"branch {item!r} is not of the form A-B")
        out.append((int(a), int(b)))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffheflow", description="Embedded power-series power flow with FACTS devices.")
    p.add_argument("--case", help="case file (MATPOWER-style text or JSON); default: built-in IEEE 118-bus")
    p.add_argument("--devices", help="device YAML file; 'builtin' selects the bundled scenarios")
    p.add_argument("--scenario", help="scenario name inside a multi-scenario device file")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-terms", type=int, default=60)
    p.add_argument("--germ", type=_germ, default="nr:3", help="flat | nr:K (default nr:3)")
    p.add_argument("--eval", choices=("sum", "pade"), default="sum")
    p.add_argument("--solver", choices=("ffhe", "nr"), default="ffhe")
    p.add_argument("--enforce-limits", action="store_true", help="relax device modes at |V_SH| / |V_SE| limits")
    p.add_argument("--max-swaps", type=int, default=5, help="device mode switches allowed before giving up")
    p.add_argument("--gen-qlim", action="store_true", help="hold generators at violated reactive limits")
    p.add_argument("--compare-nr", action="store_true", help="also time Newton-Raphson and report %%dE / %%T")
    p.add_argument("--watch", type=_branches, default=None, help="branches to report, e.g. 16-17,20-21")
    p.add_argument("--output", choices=("table", "csv", "json"), default="table")
    p.add_argument("--out", help="write the report here instead of stdout")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        case = load_case(args.case) if args.case else builtin_case()
        devices, settings = (), {}
        if args.devices:
            src = builtin_scenarios() if args.devices == "builtin" else Path(args.devices)
            if not Path(src).exists():
                raise FileNotFoundError(f"device file {src} not found")
            devices, settings = load_devices(Path(src), args.scenario)
        options = RunOptions(
            solver=args.solver,
            solve=SolveOptions(tolerance=args.tol, max_terms=args.max_terms, germ=args.germ,
                               eval_method="pade" if args.eval == "pade" else "partial_sum"),
            enforce_limits=args.enforce_limits or bool(settings.get("enforce_limits", False)),
            enforce_gen_qlim=args.gen_qlim or bool(settings.get("gen_qlim", False)),
            max_swaps=args.max_swaps,
        )
        watch = args.watch if args.watch is not None else [tuple(w) for w in settings.get("watch", [])]
        result = run_powerflow(case, devices, options)
        metrics = compare_solvers(case, devices, options) if args.compare_nr else None
        text = emit_report(result, args.output, watch=watch, metrics=metrics)
    except (FFHEError, OSError, ValueError) as exc:
        print(f"ffheflow: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if result.status == "oscillating":
        return EXIT_OSCILLATION
    return EXIT_OK if result.status == "converged" else EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
