"""Shared-nothing night simulation: per-partition frame chains and queries.

Each partition owns a disjoint footprint slice, its own template, store,
light-curve set and detectors; partitions never share state, so a night can
run serially or with one process per partition with identical results.  The
per-frame chain is match -> append -> curve update -> online mining ->
candidate tracking, and every stage is timed so cadence compliance (a frame
fully processed inside the 15 s exposure gap) is measured, not assumed.

Catalog products (delta segments, base runs, alert and truth CSVs) are
deterministic for a given seed; the cadence CSVs carry wall-clock timings and
are telemetry, not products.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import DomainError, EngineConfig, EngineError, separation_to_chord
from .crossmatch import range_join
from .lightcurve import CurveSet
from .mining import (
    CandidateTracker,
    MiningConfig,
    WindowBank,
    write_alerts_csv,
)
from .skygen import (
    DEFAULT_FOOTPRINT,
    SkyModel,
    build_template,
    observe_frame,
    random_injections,
    split_footprint,
    write_truth_log,
)
from .store import SECONDS_PER_DAY, NightStore, STORE_DTYPE


class PartitionError(EngineError):
    """A partition store could not be opened or read during a gathered query."""


def partition_seed(seed: int, partition_id: int) -> int:
    """Decorrelated per-partition seed, stable across runs and platforms."""
    return int(np.random.SeedSequence([seed, partition_id]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# per-frame processing


@dataclass
class StageTimings:
    match_s: float = 0.0
    insert_s: float = 0.0
    curve_s: float = 0.0
    online_s: float = 0.0
    candidate_s: float = 0.0

    @property
    def total_s(self) -> float:
        return (
            self.match_s + self.insert_s + self.curve_s
            + self.online_s + self.candidate_s
        )


@dataclass
class FrameOutcome:
    imageid: int
    epoch: float
    n_records: int
    n_matched: int
    n_unmatched: int
    n_ambiguous: int
    alerts: list
    timings: StageTimings


class PartitionWorker:
    """Everything one partition needs to process its frame stream."""

    def __init__(
        self,
        partition_id: int,
        template,
        config: EngineConfig,
        mining: MiningConfig | None = None,
        data_dir=None,
        track_curves: bool = True,
    ):
        mining = mining or MiningConfig()
        self.partition_id = partition_id
        self.template = template
        self.config = config
        self.mining = mining
        self.store = NightStore(data_dir, partition_id) if data_dir is not None else None
        self.curves = CurveSet(template.stars["id"]) if track_curves else None
        self.bank = WindowBank(template.stars["id"], mining)
        self.tracker = CandidateTracker(
            config.match_radius_deg, config.cadence_s, mining
        )

    def process_frame(self, frame) -> FrameOutcome:
        t0 = time.perf_counter()
        matches = range_join(
            frame.records, self.template.index, self.config.match_radius_deg
        )
        t1 = time.perf_counter()
        if self.store is not None:
            self.store.delta_insert(frame, matches)
        t2 = time.perf_counter()
        if self.curves is not None:
            self.curves.append_match(frame, matches)
        t3 = time.perf_counter()
        alerts = self.bank.update_from_match(frame, matches)
        t4 = time.perf_counter()
        unmatched = frame.records[matches.unmatched_rows]
        alerts.extend(self.tracker.update(frame.epoch, unmatched, frame.camera_id))
        t5 = time.perf_counter()
        for a in alerts:
            a.camera_id = frame.camera_id
        return FrameOutcome(
            imageid=frame.imageid,
            epoch=frame.epoch,
            n_records=len(frame.records),
            n_matched=matches.n_matched,
            n_unmatched=matches.n_unmatched,
            n_ambiguous=matches.ambiguous_count,
            alerts=alerts,
            timings=StageTimings(
                match_s=t1 - t0,
                insert_s=t2 - t1,
                curve_s=t3 - t2,
                online_s=t4 - t3,
                candidate_s=t5 - t4,
            ),
        )


CADENCE_CSV_HEADER = [
    "imageid", "epoch", "n_records", "n_matched", "n_unmatched", "n_ambiguous",
    "n_alerts", "match_s", "insert_s", "curve_s", "online_s", "candidate_s",
    "total_s",
]


@dataclass
class CadenceReport:
    """Per-frame stage timings for one partition's night."""

    partition_id: int
    cadence_s: float
    frames: list = field(default_factory=list)

    def add(self, outcome: FrameOutcome) -> None:
        self.frames.append(outcome)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def totals(self) -> np.ndarray:
        return np.array([f.timings.total_s for f in self.frames])

    @property
    def max_frame_s(self) -> float:
        return float(self.totals().max()) if self.frames else 0.0

    @property
    def mean_frame_s(self) -> float:
        return float(self.totals().mean()) if self.frames else 0.0

    @property
    def cadence_ok(self) -> bool:
        return self.max_frame_s < self.cadence_s

    def stage_means(self) -> dict:
        if not self.frames:
            return {}
        out = {}
        for name in ("match_s", "insert_s", "curve_s", "online_s", "candidate_s"):
            out[name] = float(np.mean([getattr(f.timings, name) for f in self.frames]))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CADENCE_CSV_HEADER)
            for f in self.frames:
                t = f.timings
                w.writerow(
                    [
                        f.imageid, repr(f.epoch), f.n_records, f.n_matched,
                        f.n_unmatched, f.n_ambiguous, len(f.alerts),
                        repr(t.match_s), repr(t.insert_s), repr(t.curve_s),
                        repr(t.online_s), repr(t.candidate_s), repr(t.total_s),
                    ]
                )


# ---------------------------------------------------------------------------
# night orchestration


@dataclass
class NightSummary:
    partition_id: int
    night_id: int
    n_frames: int
    n_records: int
    n_matched: int
    n_unmatched: int
    n_ambiguous: int
    alerts: dict
    wall_s: float
    mean_frame_s: float
    max_frame_s: float
    cadence_ok: bool
    store_records: int = 0
    store_bytes: int = 0
    merge_duration_s: float = 0.0
    alerts_path: str = ""
    cadence_path: str = ""
    truth_path: str = ""


def _run_partition(
    out_dir,
    partition_id: int,
    n_partitions: int,
    config: EngineConfig,
    mining: MiningConfig,
    seed: int,
    night_id: int,
    n_frames: int,
    stars_per_partition: int,
    n_new_sources: int,
    n_brightenings: int,
    use_store: bool,
    do_merge: bool,
    track_curves: bool,
    injections_override=None,
    write_timing: bool = False,
) -> NightSummary:
    """One partition's whole night; built and torn down in-process."""
    wall0 = time.perf_counter()
    footprint = split_footprint(DEFAULT_FOOTPRINT, n_partitions)[partition_id]
    model = SkyModel(
        seed=partition_seed(seed, partition_id),
        star_count=stars_per_partition,
        footprint=footprint,
    )
    template = build_template(model, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    worker = PartitionWorker(
        partition_id,
        template,
        config,
        mining,
        data_dir=out_dir if use_store else None,
        track_curves=track_curves,
    )
    if injections_override is not None:
        injections = tuple(
            inj for inj in injections_override if inj.camera_id == partition_id
        )
    else:
        injections = random_injections(
            template,
            model,
            config,
            seed=model.seed,
            n_new_sources=n_new_sources,
            n_brightenings=n_brightenings,
            night_id=night_id,
            frames_per_night=n_frames,
            # events only begin once the online baselines are warm, otherwise
            # a short event inside the warm-up window could never alert
            min_on_frame=mining.min_window + 1,
            camera_id=partition_id,
        )
    report = CadenceReport(partition_id=partition_id, cadence_s=config.cadence_s)
    alerts = []
    counts = {"n_records": 0, "n_matched": 0, "n_unmatched": 0, "n_ambiguous": 0}
    for i in range(n_frames):
        epoch = night_id * SECONDS_PER_DAY + i * config.cadence_s
        frame = observe_frame(
            template, epoch, injections, model, config, camera_id=partition_id
        )
        outcome = worker.process_frame(frame)
        report.add(outcome)
        alerts.extend(outcome.alerts)
        counts["n_records"] += outcome.n_records
        counts["n_matched"] += outcome.n_matched
        counts["n_unmatched"] += outcome.n_unmatched
        counts["n_ambiguous"] += outcome.n_ambiguous

    merge_s = 0.0
    if use_store and do_merge:
        merge_s = worker.store.nightly_merge().duration_s

    alerts_path = cadence_path = truth_path = ""
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        alerts_path = str(out_dir / f"alerts_p{partition_id:02d}.csv")
        truth_path = str(out_dir / f"truth_p{partition_id:02d}.csv")
        write_alerts_csv(alerts_path, alerts)
        write_truth_log(truth_path, injections)
        if write_timing:
            # wall-clock telemetry: deliberately not part of the
            # deterministic product set
            cadence_path = str(out_dir / f"cadence_p{partition_id:02d}.csv")
            report.write_csv(cadence_path)

    by_kind: dict = {}
    for a in alerts:
        by_kind[a.kind] = by_kind.get(a.kind, 0) + 1
    summary = NightSummary(
        partition_id=partition_id,
        night_id=night_id,
        n_frames=n_frames,
        alerts=by_kind,
        wall_s=time.perf_counter() - wall0,
        mean_frame_s=report.mean_frame_s,
        max_frame_s=report.max_frame_s,
        cadence_ok=report.cadence_ok,
        alerts_path=alerts_path,
        cadence_path=cadence_path,
        truth_path=truth_path,
        **counts,
    )
    if use_store and worker.store is not None:
        summary.store_records = worker.store.stats.records_ingested
        summary.store_bytes = worker.store.stats.bytes_on_disk
        summary.merge_duration_s = merge_s
    return summary


def run_night(
    out_dir,
    config: EngineConfig | None = None,
    mining: MiningConfig | None = None,
    seed: int = 0,
    night_id: int = 0,
    n_partitions: int = 1,
    n_frames: int | None = None,
    stars_per_partition: int | None = None,
    n_new_sources: int = 0,
    n_brightenings: int = 0,
    workers: int = 1,
    use_store: bool = True,
    do_merge: bool = False,
    track_curves: bool = False,
    injections=None,
    write_timing: bool = False,
) -> list:
    """Simulate one night across partitions; returns per-partition summaries.

    ``workers > 1`` runs partitions in separate processes; results are
    identical to the serial path because partitions share nothing.  When
    ``injections`` is given (a sequence of TransientInjection), each partition
    takes the entries whose ``camera_id`` names it and no random injections
    are drawn.
    """
    config = config or EngineConfig()
    mining = mining or MiningConfig()
    if n_partitions < 1:
        raise DomainError(f"n_partitions must be >= 1, got {n_partitions}")
    n_frames = config.frames_per_night if n_frames is None else n_frames
    stars = (
        config.sources_per_frame if stars_per_partition is None else stars_per_partition
    )
    args = [
        (
            out_dir, p, n_partitions, config, mining, seed, night_id, n_frames,
            stars, n_new_sources, n_brightenings, use_store, do_merge,
            track_curves, injections, write_timing,
        )
        for p in range(n_partitions)
    ]
    if workers <= 1:
        return [_run_partition(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_partition_star, args))


def _run_partition_star(args):
    return _run_partition(*args)


def write_night_summary(path, summaries) -> None:
    payload = [asdict(s) for s in summaries]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# scatter-gather query


@dataclass
class QueryPredicate:
    """Conjunctive record filter for cross-partition queries."""

    star_id: int | None = None
    epoch_min: float | None = None
    epoch_max: float | None = None
    cone: tuple | None = None  # (ra_deg, dec_deg, radius_deg)
    mag_min: float | None = None
    mag_max: float | None = None
    include_candidates: bool = True


def _apply_local_filters(rec: np.ndarray, pred: QueryPredicate) -> np.ndarray:
    if pred.cone is not None and len(rec):
        ra, dec, radius = pred.cone
        ra_r, dec_r = np.radians(ra), np.radians(dec)
        center = np.array(
            [np.cos(dec_r) * np.cos(ra_r), np.cos(dec_r) * np.sin(ra_r), np.sin(dec_r)]
        )
        d2 = (
            (rec["x"] - center[0]) ** 2
            + (rec["y"] - center[1]) ** 2
            + (rec["z"] - center[2]) ** 2
        )
        rec = rec[d2 <= separation_to_chord(radius) ** 2]
    if pred.mag_min is not None and len(rec):
        rec = rec[rec["calmag"] >= pred.mag_min]
    if pred.mag_max is not None and len(rec):
        rec = rec[rec["calmag"] <= pred.mag_max]
    return rec


def _query_partition(root, partition_id: int, pred: QueryPredicate) -> np.ndarray:
    pdir = Path(root) / f"partition_{partition_id:02d}"
    if not pdir.is_dir():
        raise PartitionError(f"partition {partition_id} missing under {root}")
    try:
        store = NightStore(root, partition_id)
        rec = store.query_records(
            star_id=pred.star_id,
            epoch_min=pred.epoch_min,
            epoch_max=pred.epoch_max,
            include_candidates=pred.include_candidates,
        )
    except EngineError as exc:
        raise PartitionError(f"partition {partition_id}: {exc}") from exc
    return _apply_local_filters(rec, pred)


def scatter_gather_query(
    root,
    partition_ids,
    predicate: QueryPredicate,
    max_threads: int = 8,
) -> np.ndarray:
    """Fan a predicate out to partition stores and merge the results.

    Partition reads are independent file scans, so they overlap well in
    threads.  An unreadable partition fails the whole query with a
    ``PartitionError`` naming it — a silent partial answer would look like a
    real catalog result.
    """
    partition_ids = list(partition_ids)
    if not partition_ids:
        return np.zeros(0, STORE_DTYPE)
    with ThreadPoolExecutor(max_workers=min(max_threads, len(partition_ids))) as pool:
        parts = list(
            pool.map(lambda p: _query_partition(root, p, predicate), partition_ids)
        )
    out = np.concatenate(parts) if parts else np.zeros(0, STORE_DTYPE)
    order = np.lexsort((out["id"], out["epoch"]))
    return out[order]


def replay_online(
    records: np.ndarray,
    config: EngineConfig,
    mining: MiningConfig | None = None,
) -> list:
    """Re-run the online detectors over stored rows, one epoch at a time.

    The replay sees exactly what the live chain saw: matched rows feed the
    window bank, candidate rows feed the persistence tracker, and rows within
    a frame arrive in record-id order, which is the original frame row order.
    """
    mining = mining or MiningConfig()
    if not len(records):
        return []
    order = np.lexsort((records["id"], records["epoch"]))
    rec = records[order]
    star_ids = np.unique(rec["star_id"][rec["star_id"] >= 0])
    bank = WindowBank(star_ids, mining)
    tracker = CandidateTracker(config.match_radius_deg, config.cadence_s, mining)
    alerts = []
    epochs, starts = np.unique(rec["epoch"], return_index=True)
    bounds = np.append(starts, len(rec))
    for epoch, lo, hi in zip(epochs, bounds[:-1], bounds[1:]):
        chunk = rec[lo:hi]
        camera_id = int(chunk["id"][0] >> np.uint64(56))
        matched = chunk[chunk["star_id"] >= 0]
        if len(matched):
            alerts.extend(
                bank.update(
                    epoch,
                    matched["star_id"],
                    matched["calmag"],
                    matched["mag_error"],
                    record_ids=matched["id"],
                    camera_id=camera_id,
                )
            )
        alerts.extend(
            tracker.update(epoch, chunk[chunk["candidate"] == 1], camera_id=camera_id)
        )
    return alerts


# ---------------------------------------------------------------------------
# scaling benchmark


@dataclass
class ScalingPoint:
    workers: int
    n_partitions: int
    wall_s: float
    speedup: float
    efficiency: float


SCALING_CSV_HEADER = ["workers", "n_partitions", "wall_s", "speedup", "efficiency"]


def scaling_benchmark(
    worker_counts,
    n_partitions: int = 4,
    n_frames: int = 60,
    stars_per_partition: int = 2000,
    config: EngineConfig | None = None,
    mining: MiningConfig | None = None,
    seed: int = 0,
) -> list:
    """Fixed workload timed under different worker counts.

    Efficiency is serial wall time divided by (workers x parallel wall time);
    the serial baseline is always measured first with one worker.
    """
    config = config or EngineConfig()
    mining = mining or MiningConfig()

    def once(workers: int) -> float:
        t0 = time.perf_counter()
        run_night(
            None,
            config,
            mining,
            seed=seed,
            n_partitions=n_partitions,
            n_frames=n_frames,
            stars_per_partition=stars_per_partition,
            workers=workers,
            use_store=False,
            track_curves=False,
        )
        return time.perf_counter() - t0

    baseline = once(1)
    points = [
        ScalingPoint(
            workers=1, n_partitions=n_partitions, wall_s=baseline,
            speedup=1.0, efficiency=1.0,
        )
    ]
    for w in worker_counts:
        if w == 1:
            continue
        wall = once(w)
        speedup = baseline / wall if wall > 0 else float("inf")
        points.append(
            ScalingPoint(
                workers=w, n_partitions=n_partitions, wall_s=wall,
                speedup=speedup, efficiency=speedup / w,
            )
        )
    return points


def write_scaling_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCALING_CSV_HEADER)
        for p in points:
            w.writerow(
                [p.workers, p.n_partitions, repr(p.wall_s), repr(p.speedup),
                 repr(p.efficiency)]
            )
