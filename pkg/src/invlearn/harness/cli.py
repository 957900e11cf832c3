"""
Command line entry point.

    invlearn gen [--study run|descent|schedules|concentration] [--out PATH]
    invlearn run|descent|schedules|concentration --config PATH [--jobs N] [--seed U64] [--out DIR] [--timing]
    invlearn report --out DIR

Exit status: 0 when the study verdict passes, 2 when it fails, 1 on errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import InvLearnError
from .config import parse_config, sample_config, serialize_config
from .report import emit_report, load_report, write_plots
from .studies import STUDIES

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invlearn", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a sample config")
    gen.add_argument("--study", choices=sorted(STUDIES), default="run")
    gen.add_argument("--out", type=Path, default=None, help="file to write (default: stdout)")

    for name, text in (("run", "rate study"), ("descent", "descent and containment profile"),
                       ("schedules", "mini-batch schedule comparison"),
                       ("concentration", "concentration quantiles against their bounds")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=_seed, default=None, help="override the master seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")
        p.add_argument("--timing", action="store_true", help="write measured wall times into results.csv")

    rep = sub.add_parser("report", help="re-render plots and print the verdict of a finished study")
    rep.add_argument("--out", type=Path, required=True)
    return parser


def _print_verdict(summary: dict, passed: bool) -> None:
    study = summary.get("study", "?")
    lines = [f"study: {study}"]
    if study == "rate":
        lines.append(f"slope {summary.get('slope')} vs target {summary.get('target_slope')} "
                     f"+- {summary.get('tolerance')}")
    elif study == "schedules":
        for case, block in summary.get("cases", {}).items():
            lines.append(f"case ({case}): slope {block.get('slope')} passes {block.get('passes')}")
        lines.append(f"spread at n={summary.get('largest_n')}: {summary.get('spread_at_largest_n')}")
    elif study == "descent":
        for row in summary.get("per_n", []):
            lines.append(f"n={row['n']}: fraction {row['fraction']:.3f}")
    lines.append("verdict: " + ("PASS" if passed else "FAIL"))
    print("\n".join(lines))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            text = serialize_config(sample_config(args.study))
            if args.out is None:
                sys.stdout.write(text)
            else:
                args.out.write_text(text, encoding="utf-8")
            return EXIT_PASS
        if args.command == "report":
            report = load_report(args.out)
            write_plots(report, args.out / "plots")
            _print_verdict(report.summary, report.passed)
            return EXIT_PASS if report.passed else EXIT_FAIL
        cfg = parse_config(args.config)
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.out is not None:
            updates["output"] = str(args.out)
        cfg = cfg.model_copy(update=updates)
        if args.jobs < 1:
            raise InvLearnError("--jobs must be >= 1")
        report = STUDIES[args.command](cfg, jobs=args.jobs)
        paths = emit_report(report, cfg.output, timing=args.timing)
        _print_verdict(report.summary, report.passed)
        print(f"wrote {paths['results']}")
        return EXIT_PASS if report.passed else EXIT_FAIL
    except (InvLearnError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
