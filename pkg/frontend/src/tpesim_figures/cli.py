"""Batch figure rendering: point at a results directory, get PNG and SVG."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .io import SchemaError, read_replicates, read_results
from .render import METRICS, FigureSpec, render, render_zipper


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="figures",
                                 description="render estimator-comparison figures from CSVs")
    ap.add_argument("--in", dest="in_dir", required=True,
                    help="directory holding results.csv (and replicates.csv for zippers)")
    ap.add_argument("--out", dest="out_dir", required=True)
    ap.add_argument("--metric", action="append", choices=METRICS, default=None,
                    help="metric panel(s) to render; default: all")
    ap.add_argument("--zipper", action="append", default=None, metavar="SCENARIO_ID",
                    help="also render a zipper panel for this scenario id; "
                         "'all' renders every scenario in replicates.csv")
    ap.add_argument("--methods", default=None,
                    help="comma-separated method subset")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    in_dir = Path(args.in_dir)
    methods = tuple(m.strip().upper() for m in args.methods.split(",")) if args.methods else ()
    try:
        results = read_results(in_dir / "results.csv")
        written = []
        for metric in args.metric or METRICS:
            written += render(results, FigureSpec(metric, methods=methods), args.out_dir)
        if args.zipper:
            replicates = read_replicates(in_dir / "replicates.csv")
            wanted = args.zipper
            if "all" in wanted:
                wanted = sorted({r["scenario_id"] for r in replicates})
            for sid in wanted:
                written += render_zipper(replicates, results, sid, args.out_dir,
                                         methods=methods)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 — CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
