"""Regenerate the theoretical footprint table (six activation shapes x five densities).

    python scripts/footprint_table.py --out results/footprint_table.md --format md
"""

import argparse

from bitstash.cli import bench_rows
from bitstash.tables import render, write_output

COLUMNS = ["batch", "channels", "width", "height", "num_elements", "pct_nonzero",
           "dense_mib", "bitmap_mib", "improvement_pct"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "md"], default="md")
    p.add_argument("--all-columns", action="store_true", help="also emit COO and ledger columns")
    p.add_argument("--out", default=None)
    args = p.parse_args()
    rows = bench_rows(args.seed)
    write_output(render(rows, args.format, None if args.all_columns else COLUMNS), args.out)


if __name__ == "__main__":
    main()
