"""Command-line front end.

    stochfts certify CONFIG [--out DIR] [--seed N] [--json]
    stochfts simulate CONFIG --out DIR [--seed N] [--paths N] [--workers N] [--json]
    stochfts reproduce NAME --out DIR [--seed N] [--paths N] [--workers N] [--json]
    stochfts parse-check EXPR

Exit status: 0 when every check and verdict passes, 2 on a violation or a
failed/inconclusive verdict, 1 on an operational error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .expr import ExpressionError, parse
from .pipeline import EXIT_ERROR, EXIT_OK, run_certify, run_reproduce, run_simulate
from .systems import BUILTIN_NAMES


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


class _Parser(argparse.ArgumentParser):
    # usage errors are operational errors; status 2 is reserved for violations
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochfts", description="Finite-time stability laboratory for Ito SDEs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim: bool):
        p.add_argument("--seed", type=_non_negative, help="override every seed in the config")
        p.add_argument("--json", action="store_true", help="print the report to stdout")
        if sim:
            p.add_argument("--paths", type=_positive, help="override sim.paths")
            p.add_argument("--workers", type=_positive, default=1, help="worker processes (results do not change)")

    p = sub.add_parser("certify", help="run the declared certificate checks")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, help="directory for report.json")
    common(p, sim=False)

    p = sub.add_parser("simulate", help="simulate an ensemble and estimate settling statistics")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    common(p, sim=True)

    p = sub.add_parser("reproduce", help="certify and simulate a shipped example end to end")
    p.add_argument("name", choices=BUILTIN_NAMES)
    p.add_argument("--out", type=Path, required=True)
    common(p, sim=True)

    p = sub.add_parser("parse-check", help="parse an expression and print its canonical form")
    p.add_argument("expr")
    return parser


def _summary(report) -> str:
    body = report.body
    lines = [f"verdict: {body['verdict']['status']}"]
    for name, check in body.get("checks", {}).items():
        if "error" in check:
            lines.append(f"  {name}: error: {check['error']}")
        elif "n_violations" in check:
            lines.append(f"  {name}: {check['n_violations']}/{check['n_samples']} violations")
        elif "report" in check:
            inner = check["report"]
            tail = "" if inner is None else f", {inner['n_violations']}/{inner['n_samples']} violations"
            lines.append(f"  {name}: estimated H {check['estimated_H']:.6g}{tail}")
        else:
            parts = ", ".join(f"{k} {v['n_violations']}" for k, v in check.items())
            lines.append(f"  {name}: violations {parts}")
    if "uasf" in body and "status" in body["uasf"]:
        u = body["uasf"]
        lines.append(f"  uasf: {u['status']} (c={u['c']:.6g}, d={u['d']:.6g}, residual {u['max_residual']:.3g})")
    if "settling_bound" in body:
        lines.append(f"  settling bound: {body['settling_bound']['value']:.6g}")
    if "settling" in body:
        s = body["settling"]
        mean = "n/a" if s["mean"] is None else f"{s['mean']:.4g} +- {s['stderr']:.2g}"
        lines.append(f"  settling: absorbed {s['fraction_absorbed']:.3f}, mean {mean}")
    if "bound_check" in body:
        lines.append(f"  bound check: {body['bound_check']['verdict']}")
    for key in ("containment", "nonattraction"):
        if key in body:
            e = body[key]
            lines.append(f"  {key}: {e['estimate']:.4f} [{e['ci_low']:.4f}, {e['ci_high']:.4f}] {e['verdict']}")
    for msg in body["verdict"]["failures"] + body["verdict"]["errors"]:
        lines.append(f"  - {msg}")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "parse-check":
        try:
            print(parse(args.expr))
        except ExpressionError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        return EXIT_OK

    if args.command == "certify":
        report = run_certify(args.config, args.out, seed=args.seed)
    elif args.command == "simulate":
        report = run_simulate(args.config, args.out, seed=args.seed, paths=args.paths, workers=args.workers)
    else:
        report = run_reproduce(args.name, args.out, seed=args.seed, paths=args.paths, workers=args.workers)

    if args.json:
        sys.stdout.write(report.to_json())
    else:
        print(_summary(report))
    for msg in report.errors:
        print(f"error: {msg}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
