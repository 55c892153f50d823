"""traffic-convert: one-shot archive-to-CSV conversion tool."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .convert import ConversionError, ConversionSpec, convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traffic-convert",
        description="Convert an HDF5 traffic series plus pickled adjacency "
                    "into the simulator's portable CSV formats",
    )
    parser.add_argument("--series", required=True, help="HDF5 series file (e.g. metr-la.h5)")
    parser.add_argument("--adj", required=True, help="pickled adjacency file (e.g. adj_mx.pkl)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--zero-missing", action="store_true",
                        help="treat exact 0.0 readings as missing (METR-LA convention)")
    parser.add_argument("--interval", type=int, default=5, help="minutes per timestep")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ConversionSpec(
        series_path=Path(args.series),
        adjacency_path=Path(args.adj),
        output_dir=Path(args.out),
        zero_is_missing=args.zero_missing,
        interval_min=args.interval,
    )
    try:
        report = convert(spec)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for line in report.lines():
        print(line)
    print(f"wrote {spec.output_dir / 'series.csv'} and {spec.output_dir / 'graph.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
