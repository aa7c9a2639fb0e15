"""Command line: render error-history or sweep-comparison figures.

Either pass a JSON plot-spec file or mirror its fields with flags.
"""

from __future__ import annotations

import argparse
import json
import sys

from .plots import PlotInputError, PlotSpec, plot_error_histories, plot_sweep


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nudgeplot", description="figures from twin-experiment CSV output"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_err = sub.add_parser("errors", help="overlay per-run error histories")
    p_err.add_argument("--spec", help="JSON file with PlotSpec fields")
    p_err.add_argument("--csv", action="append", default=[], help="input errors.csv")
    p_err.add_argument("--label", action="append", default=[])
    p_err.add_argument("--out", default="errors.svg")
    p_err.add_argument("--title", default="")
    p_err.add_argument("--linear-y", action="store_true")
    p_err.add_argument("--floor", type=float, default=1e-13)

    p_sw = sub.add_parser("sweep", help="plot a sweep's combined table")
    p_sw.add_argument("--csv", required=True, help="combined.csv from a sweep")
    p_sw.add_argument("--out", default="sweep.svg")
    p_sw.add_argument("--axis-label", default="")
    p_sw.add_argument("--title", default="")

    args = parser.parse_args(argv)
    try:
        if args.command == "errors":
            if args.spec:
                fields = json.loads(open(args.spec, encoding="utf-8").read())
                spec = PlotSpec(**fields)
            else:
                spec = PlotSpec(
                    csv_paths=args.csv,
                    labels=args.label or None,
                    log_y=not args.linear_y,
                    floor=args.floor,
                    output=args.out,
                    title=args.title,
                )
            data = plot_error_histories(spec)
        else:
            data = plot_sweep(args.csv, args.out, axis_label=args.axis_label,
                              title=args.title)
        print(f"wrote {data.path}")
        return 0
    except PlotInputError as err:
        print(f"input error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
