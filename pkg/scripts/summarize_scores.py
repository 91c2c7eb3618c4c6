"""Aggregate a scores.csv written by `enkpf run` into a small text report.

Prints, per field, the mean CRPS relative to the free ensemble (percent,
lower is better) for each method, averaged over repetitions: once at the
final cycle and once as a cycle-by-cycle table for a chosen field.
"""

import argparse
import csv
import sys
from collections import defaultdict


def load_records(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rel = row["relative_pct"]
            rows.append(
                {
                    "rep": int(row["rep"]),
                    "cycle": int(row["cycle"]),
                    "method": row["method"],
                    "field": row["field"],
                    "relative_pct": float(rel) if rel else None,
                }
            )
    return rows


def mean_relative(rows, method, field, cycle):
    vals = [
        r["relative_pct"]
        for r in rows
        if r["method"] == method
        and r["field"] == field
        and r["cycle"] == cycle
        and r["relative_pct"] is not None
    ]
    return sum(vals) / len(vals) if vals else None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scores", help="path to scores.csv")
    ap.add_argument("--field", default="r", choices=("h", "u", "r"),
                    help="field for the per-cycle table")
    args = ap.parse_args(argv)

    rows = load_records(args.scores)
    if not rows:
        print("no records", file=sys.stderr)
        return 1
    methods = sorted({r["method"] for r in rows})
    fields = [f for f in ("h", "u", "r") if any(r["field"] == f for r in rows)]
    last = max(r["cycle"] for r in rows)
    reps = len({r["rep"] for r in rows})

    print(f"{reps} repetitions, {last} cycles")
    print(f"\nmean CRPS relative to free (%) at cycle {last}:")
    header = "method".ljust(14) + "".join(f.rjust(8) for f in fields)
    print(header)
    for m in methods:
        cells = []
        for f in fields:
            val = mean_relative(rows, m, f, last)
            cells.append("   --".rjust(8) if val is None else f"{val:8.1f}")
        print(m.ljust(14) + "".join(cells))

    print(f"\nper-cycle mean relative CRPS (%), field {args.field}:")
    print("cycle".ljust(8) + "".join(m.rjust(14) for m in methods))
    by_cycle = defaultdict(dict)
    for m in methods:
        for c in range(1, last + 1):
            by_cycle[c][m] = mean_relative(rows, m, args.field, c)
    for c in range(1, last + 1):
        cells = [
            "   --".rjust(14) if by_cycle[c][m] is None else f"{by_cycle[c][m]:14.1f}"
            for m in methods
        ]
        print(str(c).ljust(8) + "".join(cells))
    return 0


if __name__ == "__main__":
    sys.exit(main())
