"""Time the three scan forms over doubling lengths and check their growth rates.

Usage: python3 scripts/bench_scan.py [--max-len 65536] [--out bench.csv]
"""

import argparse

from ssmflow.bench import amortized_ratio, bench_scan, format_table, write_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--max-len", type=int, default=65536)
    p.add_argument("--min-len", type=int, default=1024)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="bench.csv")
    args = p.parse_args()
    rows = bench_scan(max_len=args.max_len, min_len=args.min_len, repeats=args.repeats)
    write_csv(rows, args.out)
    print(format_table(rows))
    for form, lo, hi in (("sequential", 1.6, 2.6), ("parallel", 1.6, 2.6), ("kernel", 3.0, float("inf"))):
        r = amortized_ratio(rows, form)
        print(f"{form:<11} amortized t(2L)/t(L) above L=4096: {r:.2f}  ({'ok' if lo <= r <= hi else 'out of range'})")


if __name__ == "__main__":
    main()
