#!/usr/bin/env python3
"""Shared-nothing scaling: the same night under different worker counts.

Partitions never share state, so the night should parallelize close to
linearly until the core count runs out.  Prints the speedup/efficiency table
and optionally writes it as CSV.

    python3 scripts/bench_scaling.py --workers 1,2,4 --partitions 4
"""

import argparse

from tdcat.core import EngineConfig
from tdcat.mining import MiningConfig
from tdcat.pipeline import scaling_benchmark, write_scaling_csv


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workers", default="1,2,4",
                    help="comma-separated worker counts (serial baseline is "
                         "always measured first)")
    ap.add_argument("--partitions", type=int, default=4)
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--stars", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write the table as CSV")
    args = ap.parse_args(argv)

    points = scaling_benchmark(
        [int(w) for w in args.workers.split(",")],
        n_partitions=args.partitions,
        n_frames=args.frames,
        stars_per_partition=args.stars,
        config=EngineConfig(),
        mining=MiningConfig(),
        seed=args.seed,
    )
    print(f"{'workers':>7}  {'wall_s':>7}  {'speedup':>7}  {'efficiency':>10}")
    for p in points:
        print(f"{p.workers:>7}  {p.wall_s:>7.2f}  {p.speedup:>7.2f}  "
              f"{p.efficiency:>10.2f}")
    if args.out:
        write_scaling_csv(args.out, points)
        print(f"scaling table -> {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
