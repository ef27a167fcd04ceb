"""Command line: render regret figures from a treebandit output directory.

    treebandit-plot --in DIR --out FILE [--loglog] [--depths 1,2,3]

`--in` accepts the experiment output directory (holding aggregate.csv) or
a CSV path, repeatable. Prints the root curve's fitted tail slope.
Exit codes: 0 success, 2 bad arguments or schema mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .render import PlotSpec, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="treebandit-plot", description=__doc__)
    parser.add_argument("--in", dest="inputs", action="append", required=True,
                        help="output directory of `treebandit run` (or aggregate CSV path)")
    parser.add_argument("--out", required=True, help="figure file (format by extension; .pdf, .png, ...)")
    parser.add_argument("--loglog", action="store_true", help="log-log axes")
    parser.add_argument("--depths", default=None, help="comma-separated depths to include")
    parser.add_argument("--metric", default="regret_total",
                        choices=["regret_total", "regret_action", "regret_payment",
                                 "regret_deviation", "welfare_regret", "w1"])
    parser.add_argument("--anchor-t", type=int, default=None,
                        help="normalize reference lines at this round (default: final checkpoint)")
    args = parser.parse_args(argv)

    depths = None
    if args.depths:
        try:
            depths = tuple(int(d) for d in args.depths.split(","))
        except ValueError:
            print(f"bad --depths value: {args.depths!r}", file=sys.stderr)
            return 2

    spec = PlotSpec(
        inputs=tuple(Path(p) for p in args.inputs),
        output=Path(args.out),
        depths=depths,
        loglog=args.loglog,
        anchor_t=args.anchor_t,
        metric=args.metric,
    )
    try:
        result = render(spec)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result['output']}")
    print(f"root tail slope (final decade, log-log fit): {result['root_tail_slope']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
