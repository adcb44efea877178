"""Command-line front end: covsteer-plot --moments m.csv --ensemble e.csv
--coords i,j --out fig.svg [--stride N] [--max-paths N]."""

from __future__ import annotations

import argparse
import sys

from .figures import FigureSpec, SchemaError, plot_ensemble


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="covsteer-plot",
        description=(
            "Draw mean trajectories, 3-sigma covariance ellipses, and sampled "
            "paths from covsteer moments.csv / ensemble.csv files."
        ),
    )
    parser.add_argument("--moments", required=True, help="moments.csv from the solver")
    parser.add_argument("--ensemble", required=True, help="ensemble.csv from the simulator")
    parser.add_argument("--coords", required=True, help="pair of state indices, e.g. 0,1")
    parser.add_argument("--out", required=True, help="output image (.svg or .png)")
    parser.add_argument("--stride", type=int, default=50, help="nodes between ellipses")
    parser.add_argument("--max-paths", type=int, default=10, help="sampled paths to overlay")
    args = parser.parse_args(argv)

    try:
        coords = tuple(int(tok) for tok in args.coords.split(","))
        spec = FigureSpec(
            coords=coords, out=args.out, stride=args.stride, max_paths=args.max_paths
        )
        out = plot_ensemble(args.moments, args.ensemble, spec)
    except (SchemaError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
