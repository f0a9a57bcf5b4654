"""Append-only micro-batch ingestion with nightly merge, plus on-disk formats.

Three fixed-width little-endian binary layouts, all documented in the README:

  TDS1  interchange frame/template file: magic ``TDS1``, record count (u64),
        then catalog rows in column order (162 bytes per row).
  TDL1  delta-log segment, one per ingested frame: magic ``TDL1``, record
        count (u64), frame epoch (f64), then store rows.
  TDB1  merged base run: magic ``TDB1``, record count (u64), then store rows
        sorted by (star_id, epoch, id).

A store row is a catalog row plus the matched template ``star_id`` (-1 for
transient candidates), the frame ``epoch`` and a ``candidate`` flag byte
(179 bytes per row).  The CSV interchange format carries the 22 catalog
column names as its header, in column order.

Crash safety is write-to-temp + atomic rename throughout: readers never see a
partial segment, and an interrupted merge either leaves the old base intact or
leaves a committed new base whose stale inputs are swept on recovery.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    RECORD_DTYPE,
    TABLE2_COLUMNS,
    DomainError,
    EngineConfig,
    SequenceError,
    StorageError,
)

TDS_MAGIC = b"TDS1"
DELTA_MAGIC = b"TDL1"
BASE_MAGIC = b"TDB1"

STORE_DTYPE = np.dtype(
    RECORD_DTYPE.descr + [("star_id", "<i8"), ("epoch", "<f8"), ("candidate", "u1")]
)
RECORD_SIZE = RECORD_DTYPE.itemsize  # 162
STORE_RECORD_SIZE = STORE_DTYPE.itemsize  # 179

UNMATCHED_STAR_ID = -1

SECONDS_PER_DAY = 86400.0

_INT_COLUMNS = {"id", "imageid", "zone", "flag"}


def night_of(epoch: float) -> int:
    return int(epoch // SECONDS_PER_DAY)


# ---------------------------------------------------------------------------
# file primitives


def _atomic_write(path: Path, chunks) -> int:
    """Write chunks to ``path`` via temp + rename; returns bytes written."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    written = 0
    try:
        with open(tmp, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
                written += len(chunk)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        if tmp.exists():
            tmp.unlink()
        raise StorageError(f"write to {path} failed: {exc}") from exc
    return written


def _read_exact(fh, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise StorageError(f"truncated file {path}")
    return buf


def write_records_bin(path, records: np.ndarray) -> int:
    """Interchange TDS1 file of catalog rows."""
    records = np.ascontiguousarray(records, dtype=RECORD_DTYPE)
    header = TDS_MAGIC + np.uint64(len(records)).tobytes()
    return _atomic_write(Path(path), [header, records.tobytes()])


def read_records_bin(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != TDS_MAGIC:
            raise StorageError(f"{path} is not a TDS1 file")
        (count,) = np.frombuffer(_read_exact(fh, 8, path), dtype="<u8")
        data = _read_exact(fh, int(count) * RECORD_SIZE, path)
    return np.frombuffer(data, dtype=RECORD_DTYPE).copy()


def write_records_csv(path, records: np.ndarray) -> None:
    """Interchange CSV with the 22 catalog column names as header."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE2_COLUMNS)
        for row in records:
            w.writerow(
                [
                    int(row[name]) if name in _INT_COLUMNS else repr(float(row[name]))
                    for name in TABLE2_COLUMNS
                ]
            )
    os.replace(tmp, path)


def read_records_csv(path) -> np.ndarray:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TABLE2_COLUMNS:
            raise StorageError(f"{path}: unexpected CSV header {header}")
        rows = list(reader)
    out = np.zeros(len(rows), dtype=RECORD_DTYPE)
    for i, row in enumerate(rows):
        for name, value in zip(TABLE2_COLUMNS, row):
            out[i][name] = int(value) if name in _INT_COLUMNS else float(value)
    return out


def _write_segment(path: Path, records: np.ndarray, epoch: float) -> int:
    header = DELTA_MAGIC + np.uint64(len(records)).tobytes() + np.float64(epoch).tobytes()
    return _atomic_write(path, [header, records.tobytes()])


def _read_segment(path: Path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != DELTA_MAGIC:
            raise StorageError(f"{path} is not a TDL1 segment")
        (count,) = np.frombuffer(_read_exact(fh, 8, path), dtype="<u8")
        (epoch,) = np.frombuffer(_read_exact(fh, 8, path), dtype="<f8")
        data = _read_exact(fh, int(count) * STORE_RECORD_SIZE, path)
    return np.frombuffer(data, dtype=STORE_DTYPE).copy(), float(epoch)


def _read_segment_epoch(path: Path) -> float:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != DELTA_MAGIC:
            raise StorageError(f"{path} is not a TDL1 segment")
        fh.read(8)
        (epoch,) = np.frombuffer(_read_exact(fh, 8, path), dtype="<f8")
    return float(epoch)


def _write_base(path: Path, records: np.ndarray) -> int:
    header = BASE_MAGIC + np.uint64(len(records)).tobytes()
    return _atomic_write(path, [header, records.tobytes()])


def _read_base(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != BASE_MAGIC:
            raise StorageError(f"{path} is not a TDB1 base run")
        (count,) = np.frombuffer(_read_exact(fh, 8, path), dtype="<u8")
        data = _read_exact(fh, int(count) * STORE_RECORD_SIZE, path)
    return np.frombuffer(data, dtype=STORE_DTYPE).copy()


# ---------------------------------------------------------------------------
# night store


@dataclass
class StorageStats:
    records_ingested: int = 0
    bytes_on_disk: int = 0
    segments: int = 0
    ingest_latency_s: float = 0.0
    merge_duration_s: float = 0.0


@dataclass
class InsertAck:
    records: int
    night_id: int
    segment_path: Path
    latency_s: float


@dataclass
class MergeReport:
    nights: list
    records_merged: int
    base_path: Path | None
    duration_s: float
    noop: bool


def frame_to_store_records(frame, matches) -> np.ndarray:
    """Store rows for one frame: catalog columns plus match outcome."""
    records = frame.records
    n = len(records)
    if matches.n_frame != n:
        raise DomainError(
            f"match result covers {matches.n_frame} records, frame has {n}"
        )
    if len(matches.matched_rows) and not np.array_equal(
        records["id"][matches.matched_rows].astype(np.uint64), matches.record_ids
    ):
        raise DomainError("match result does not correspond to this frame")
    out = np.zeros(n, dtype=STORE_DTYPE)
    for name in TABLE2_COLUMNS:
        out[name] = records[name]
    out["star_id"] = UNMATCHED_STAR_ID
    out["star_id"][matches.matched_rows] = matches.star_ids
    out["candidate"] = 1
    out["candidate"][matches.matched_rows] = 0
    out["epoch"] = frame.epoch
    return out


class NightStore:
    """Per-partition delta log plus merged base store.

    Exactly one writer per partition; readers only ever see fully renamed
    segment files.  Opening a store runs crash recovery: committed merges
    whose cleanup did not finish are completed, uncommitted staging files are
    discarded.
    """

    def __init__(self, root, partition_id: int):
        self.partition_id = partition_id
        self.root = Path(root) / f"partition_{partition_id:02d}"
        self.delta_dir = self.root / "delta"
        self.base_dir = self.root / "base"
        self.delta_dir.mkdir(parents=True, exist_ok=True)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self.stats = StorageStats()
        self._busy = False
        self.recover()
        self._load_state()

    # -- state ----------------------------------------------------------

    def _base_files(self):
        return sorted(self.base_dir.glob("base_through_*.tdb"))

    def base_path(self) -> Path | None:
        files = self._base_files()
        return files[-1] if files else None

    def _base_night(self) -> int:
        path = self.base_path()
        if path is None:
            return -1
        return int(path.stem.split("_")[-1])

    def _delta_nights(self):
        return sorted(
            int(p.name.split("_")[-1]) for p in self.delta_dir.glob("night_*")
        )

    def _segments(self, night_id: int):
        return sorted((self.delta_dir / f"night_{night_id:05d}").glob("seg_*.tdl"))

    def all_segments(self):
        for night in self._delta_nights():
            yield from self._segments(night)

    def _load_state(self):
        # A merged night is closed: the next insert must land strictly after it.
        base_night = self._base_night()
        self._last_epoch = (
            -np.inf if base_night < 0 else (base_night + 1) * SECONDS_PER_DAY - 1e-9
        )
        for night in self._delta_nights():
            segs = self._segments(night)
            if segs:
                self._last_epoch = max(self._last_epoch, _read_segment_epoch(segs[-1]))
        self.stats.bytes_on_disk = sum(
            p.stat().st_size for p in self.root.rglob("*") if p.is_file()
        )
        self.stats.segments = sum(len(self._segments(n)) for n in self._delta_nights())

    def recover(self) -> None:
        """Finish or roll back whatever a crash left behind."""
        for leftover in self.root.rglob("*.tmp"):
            leftover.unlink()
        for leftover in self.base_dir.glob("*.staging"):
            leftover.unlink()
        base_files = self._base_files()
        if base_files:
            newest_night = int(base_files[-1].stem.split("_")[-1])
            for old in base_files[:-1]:
                old.unlink()
            # Delta nights at or below the base high-water mark were already
            # folded in by a committed merge whose cleanup did not finish.
            for night in self._delta_nights():
                if night <= newest_night:
                    for seg in self._segments(night):
                        seg.unlink()
                    (self.delta_dir / f"night_{night:05d}").rmdir()

    # -- writes ---------------------------------------------------------

    def delta_insert(self, frame, matches) -> InsertAck:
        """Durably append one frame's records plus their match outcome."""
        if self._busy:
            raise StorageError("delta_insert overlaps another store operation")
        self._busy = True
        try:
            t0 = time.perf_counter()
            if not frame.epoch > self._last_epoch:
                raise SequenceError(
                    f"frame epoch {frame.epoch} not after last appended epoch "
                    f"{self._last_epoch}"
                )
            records = frame_to_store_records(frame, matches)
            night_id = night_of(frame.epoch)
            night_dir = self.delta_dir / f"night_{night_id:05d}"
            night_dir.mkdir(exist_ok=True)
            path = night_dir / f"seg_{frame.imageid:08d}.tdl"
            written = _write_segment(path, records, frame.epoch)
            self._last_epoch = frame.epoch
            latency = time.perf_counter() - t0
            self.stats.records_ingested += len(records)
            self.stats.bytes_on_disk += written
            self.stats.segments += 1
            self.stats.ingest_latency_s = latency
            return InsertAck(
                records=len(records),
                night_id=night_id,
                segment_path=path,
                latency_s=latency,
            )
        finally:
            self._busy = False

    def nightly_merge(self) -> MergeReport:
        """Fold all delta segments into the base run (all-or-nothing).

        The new base is written to a staging file and renamed into place; the
        rename is the commit point.  Re-running after an interruption at any
        point converges to the same base bytes.
        """
        if self._busy:
            raise StorageError("nightly_merge overlaps another store operation")
        self._busy = True
        try:
            t0 = time.perf_counter()
            self.recover()
            nights = self._delta_nights()
            if not nights:
                return MergeReport(
                    nights=[], records_merged=0, base_path=self.base_path(),
                    duration_s=time.perf_counter() - t0, noop=True,
                )
            parts = []
            base = self.base_path()
            if base is not None:
                parts.append(_read_base(base))
            for night in nights:
                for seg in self._segments(night):
                    parts.append(_read_segment(seg)[0])
            merged = np.concatenate(parts) if parts else np.zeros(0, STORE_DTYPE)
            order = np.lexsort((merged["id"], merged["epoch"], merged["star_id"]))
            merged = merged[order]

            target = max(nights)
            final = self.base_dir / f"base_through_{target:05d}.tdb"
            staging = final.with_suffix(final.suffix + ".staging")
            header = BASE_MAGIC + np.uint64(len(merged)).tobytes()
            with open(staging, "wb") as fh:
                fh.write(header)
                fh.write(merged.tobytes())
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(staging, final)  # commit point
            self.recover()  # sweeps old base + folded delta nights
            self._load_state()
            duration = time.perf_counter() - t0
            self.stats.merge_duration_s = duration
            return MergeReport(
                nights=nights,
                records_merged=len(merged),
                base_path=final,
                duration_s=duration,
                noop=False,
            )
        finally:
            self._busy = False

    # -- reads ----------------------------------------------------------

    def query_records(
        self,
        star_id: int | None = None,
        epoch_min: float | None = None,
        epoch_max: float | None = None,
        include_candidates: bool = True,
    ) -> np.ndarray:
        """Full-history scan across base and delta layers, (epoch, id) order."""
        parts = []
        base = self.base_path()
        if base is not None:
            rec = _read_base(base)
            if star_id is not None and len(rec):
                # base runs are sorted by (star_id, epoch, id)
                lo = np.searchsorted(rec["star_id"], star_id, side="left")
                hi = np.searchsorted(rec["star_id"], star_id, side="right")
                rec = rec[lo:hi]
            parts.append(rec)
        for seg in self.all_segments():
            rec = _read_segment(seg)[0]
            if star_id is not None:
                rec = rec[rec["star_id"] == star_id]
            parts.append(rec)
        out = np.concatenate(parts) if parts else np.zeros(0, STORE_DTYPE)
        if epoch_min is not None:
            out = out[out["epoch"] >= epoch_min]
        if epoch_max is not None:
            out = out[out["epoch"] <= epoch_max]
        if not include_candidates and len(out):
            out = out[out["candidate"] == 0]
        order = np.lexsort((out["id"], out["epoch"]))
        return out[order]


# ---------------------------------------------------------------------------
# capacity planning


@dataclass
class CapacityRow:
    cameras: int
    days: int
    records: int
    bytes: int


def capacity_plan(
    config: EngineConfig, days: int, bytes_per_record: int = STORE_RECORD_SIZE
) -> CapacityRow:
    """Projected record and byte volume for the configured camera count."""
    if days < 0:
        raise DomainError(f"days must be >= 0, got {days}")
    if bytes_per_record <= 0:
        raise DomainError(f"bytes_per_record must be > 0, got {bytes_per_record}")
    records = config.cameras * config.frames_per_night * config.sources_per_frame * days
    return CapacityRow(
        cameras=config.cameras,
        days=days,
        records=records,
        bytes=records * bytes_per_record,
    )


def capacity_table(
    config: EngineConfig, bytes_per_record: int = STORE_RECORD_SIZE
) -> list:
    """(1 camera, N cameras) x (one day, one 260-day year, ten years)."""
    rows = []
    for cameras in sorted({1, config.cameras}):
        cfg = replace(config, cameras=cameras)
        for days in (1, 260, 2600):
            rows.append(capacity_plan(cfg, days, bytes_per_record))
    return rows
