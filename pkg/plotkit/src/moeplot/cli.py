"""Command line wrapper around :func:`moeplot.plot.render`."""

from __future__ import annotations

import argparse
import sys

from .plot import PlotError, PlotSpec, render

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeplot",
                                description="charts from comparison CSVs")
    sub = p.add_subparsers(dest="cmd", required=True)
    plot = sub.add_parser("plot", help="render one normalized bar chart")
    plot.add_argument("--csv", required=True, help="comparison CSV path")
    plot.add_argument("--metric", required=True,
                      help="CSV column to chart, e.g. tbt_p99_ms")
    plot.add_argument("--baseline", required=True,
                      help="row group every bar is divided by")
    plot.add_argument("--out", required=True, help="output image path")
    plot.add_argument("--title")
    plot.add_argument("--group-by", choices=["config_id", "policy"],
                      help="grouping column (default: auto)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    spec = PlotSpec(csv_path=args.csv, metric=args.metric,
                    baseline=args.baseline, out_path=args.out,
                    title=args.title, group_by=args.group_by)
    try:
        values = render(spec)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {args.out} ({len(values)} bars)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
