#!/usr/bin/env python3
"""Cadence headroom at full per-camera scale, with a per-stage breakdown.

Builds a template at the real per-camera density (1.756e5 stars by default),
streams frames through a single partition worker — cross-match, delta-log
insert, light curves, online mining — and reports how each stage spends the
15 s frame budget.

    python3 scripts/bench_cadence.py --frames 20
"""

import argparse
import tempfile
import time
from pathlib import Path

from tdcat.core import EngineConfig
from tdcat.mining import MiningConfig
from tdcat.pipeline import PartitionWorker, StageTimings
from tdcat.skygen import DEFAULT_FOOTPRINT, SkyModel, build_template, observe_frame

STAGES = ("match_s", "insert_s", "curve_s", "online_s", "candidate_s")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--stars", type=int, default=175_600)
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-store", action="store_true",
                    help="skip the durable insert stage")
    args = ap.parse_args(argv)

    config, mining = EngineConfig(), MiningConfig()
    print(f"building {args.stars}-star template ...")
    model = SkyModel(seed=args.seed, star_count=args.stars,
                     footprint=DEFAULT_FOOTPRINT)
    template = build_template(model, config)

    with tempfile.TemporaryDirectory() as tmp:
        worker = PartitionWorker(
            0, template, config, mining,
            data_dir=None if args.no_store else Path(tmp),
            track_curves=True,
        )
        sums = StageTimings()
        walls = []
        for i in range(args.frames):
            frame = observe_frame(template, i * config.cadence_s, [], model, config)
            t0 = time.perf_counter()
            outcome = worker.process_frame(frame)
            walls.append(time.perf_counter() - t0)
            for stage in STAGES:
                setattr(sums, stage,
                        getattr(sums, stage) + getattr(outcome.timings, stage))

    mean = sum(walls) / len(walls)
    worst = max(walls)
    print(f"\n{args.frames} frames x {args.stars} records, "
          f"budget {config.cadence_s:.0f} s per frame")
    print(f"{'stage':<12}{'mean ms':>10}{'share':>8}")
    for stage in STAGES:
        per = getattr(sums, stage) / args.frames
        print(f"{stage[:-2]:<12}{per * 1000:>10.1f}{per / mean:>8.1%}")
    print(f"{'total':<12}{mean * 1000:>10.1f}")
    print(f"\nworst frame {worst * 1000:.1f} ms -> "
          f"{config.cadence_s / worst:.0f}x inside the cadence budget")
    return 0 if worst < config.cadence_s else 1


if __name__ == "__main__":
    raise SystemExit(main())
