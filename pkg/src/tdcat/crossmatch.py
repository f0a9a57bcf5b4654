"""Zone-partitioned spatial index and the distance-bounded RangeJoin operator.

The sky is cut into horizontal declination strips ("zones") of fixed height.
Each strip keeps its members sorted by right ascension, so candidate lookup
for a query source is a handful of binary searches instead of a full scan.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ConfigError,
    EngineConfig,
    n_zones,
    radec_to_cartesian,
    separation_to_chord,
    zone_of,
)

# Above this absolute declination a 1/cos(dec) RA window degenerates; fall
# back to scanning the full strip.
POLE_CLAMP_DEG = 89.9

# Widens RA windows just past float rounding so a true match sitting exactly
# on a window edge can never be pruned.
_WINDOW_PAD_DEG = 1e-7


@dataclass
class ZoneIndex:
    """Immutable zone-strip index over a set of catalog positions.

    Rows are stored flat, sorted by (zone, ra); ``zone_start`` gives CSR-style
    slice offsets per zone and ``key`` is the combined sort key
    ``zone * 361 + ra`` used for global binary search.
    """

    zone_height_deg: float
    ids: np.ndarray  # int64, flat
    ra: np.ndarray
    dec: np.ndarray
    xyz: np.ndarray  # (n, 3) unit vectors
    zone: np.ndarray
    zone_start: np.ndarray  # len n_zones + 1
    key: np.ndarray = field(repr=False)

    @property
    def source_count(self) -> int:
        return len(self.ids)

    @property
    def n_zones(self) -> int:
        return len(self.zone_start) - 1

    def zone_members(self, zone_id: int) -> np.ndarray:
        """Row indices belonging to one strip, in ascending ra order."""
        return np.arange(self.zone_start[zone_id], self.zone_start[zone_id + 1])

    def zones(self) -> dict:
        """Materialized map zone id -> member row indices (non-empty zones)."""
        out = {}
        for k in range(self.n_zones):
            members = self.zone_members(k)
            if len(members):
                out[k] = members
        return out


@dataclass
class MatchResult:
    """Outcome of joining one frame against a template index.

    ``record_ids``/``star_ids``/``separations_deg`` are parallel arrays over
    matched frame records (frame order); ``unmatched_ids`` are the transient
    candidates.  ``matched_rows``/``unmatched_rows`` are the corresponding row
    positions within the frame, kept so downstream stages avoid id lookups.
    """

    record_ids: np.ndarray
    star_ids: np.ndarray
    separations_deg: np.ndarray
    unmatched_ids: np.ndarray
    matched_rows: np.ndarray
    unmatched_rows: np.ndarray
    ambiguous_count: int
    n_frame: int

    @property
    def n_matched(self) -> int:
        return len(self.record_ids)

    @property
    def n_unmatched(self) -> int:
        return len(self.unmatched_ids)

    def pairs(self):
        """Iterate (frame record id, template star id, separation deg)."""
        for rid, sid, sep in zip(self.record_ids, self.star_ids, self.separations_deg):
            yield int(rid), int(sid), float(sep)


def build_zone_index(records, zone_height_deg: float) -> ZoneIndex:
    """Index catalog rows by declination strip.

    ``records`` is any structured array carrying ``id``, ``ra`` and ``dec``
    fields (catalog rows and template star tables both qualify).  Zones are
    recomputed from dec with the given strip height; a ``zone`` column in the
    input, if any, is ignored so the index never inherits a stale height.
    """
    nz = n_zones(zone_height_deg)
    ra = np.ascontiguousarray(records["ra"], dtype=np.float64)
    dec = np.ascontiguousarray(records["dec"], dtype=np.float64)
    ids = np.ascontiguousarray(records["id"]).astype(np.int64)
    zone = zone_of(dec, zone_height_deg) if len(dec) else np.zeros(0, np.int64)

    order = np.lexsort((ra, zone))
    ra, dec, ids, zone = ra[order], dec[order], ids[order], zone[order]

    names = records.dtype.names
    if "x" in names and "y" in names and "z" in names:
        xyz = np.column_stack(
            [records["x"][order], records["y"][order], records["z"][order]]
        ).astype(np.float64)
    else:
        x, y, z = radec_to_cartesian(ra, dec) if len(ra) else (ra, ra, ra)
        xyz = np.column_stack([x, y, z])

    zone_start = np.searchsorted(zone, np.arange(nz + 1))
    key = zone.astype(np.float64) * 361.0 + ra
    return ZoneIndex(
        zone_height_deg=zone_height_deg,
        ids=ids,
        ra=ra,
        dec=dec,
        xyz=np.ascontiguousarray(xyz),
        zone=zone,
        zone_start=zone_start,
        key=key,
    )


def _ra_halfwidth_deg(dec: np.ndarray, radius_deg: float) -> np.ndarray:
    """Safe RA half-window: no true match within radius can fall outside it.

    From the haversine identity, hav(dra) <= hav(r) / (cos d1 cos d2) and a
    counterpart within r has |dec| <= |dec_query| + r, so dividing by
    cos(|dec| + r) bounds the worst case over both endpoints.  To first order
    this is the familiar radius / cos(dec) window.
    """
    dmax = np.minimum(np.abs(dec) + radius_deg, POLE_CLAMP_DEG)
    s = np.sin(np.radians(radius_deg) / 2.0) / np.cos(np.radians(dmax))
    w = np.degrees(2.0 * np.arcsin(np.minimum(1.0, s))) + _WINDOW_PAD_DEG
    # Full-circle scan once the window stops being a pruning window at all.
    w[np.abs(dec) + radius_deg >= POLE_CLAMP_DEG] = 360.0
    return w


def range_join(frame, template_index: ZoneIndex, radius_deg: float) -> MatchResult:
    """Match each frame record to its nearest in-radius template star.

    Candidates are drawn only from zones within ceil(radius / zone_height) of
    the record's zone and inside a declination-inflated RA window (two-interval
    lookup across the 0/360 seam).  Among candidates within ``radius_deg`` the
    nearest wins; exact separation ties break toward the smaller template star
    id.  Records with no in-radius candidate are returned as unmatched
    transient candidates.
    """
    if not 0 < radius_deg <= 90:
        raise ConfigError(f"radius_deg must be in (0, 90], got {radius_deg}")
    records = frame.records if hasattr(frame, "records") else frame
    n = len(records)
    if n == 0:
        empty_i = np.zeros(0, np.int64)
        return MatchResult(
            record_ids=np.zeros(0, np.uint64),
            star_ids=empty_i,
            separations_deg=np.zeros(0),
            unmatched_ids=np.zeros(0, np.uint64),
            matched_rows=empty_i,
            unmatched_rows=empty_i,
            ambiguous_count=0,
            n_frame=0,
        )

    h = template_index.zone_height_deg
    nz = template_index.n_zones
    ra = np.ascontiguousarray(records["ra"], dtype=np.float64)
    dec = np.ascontiguousarray(records["dec"], dtype=np.float64)
    names = records.dtype.names
    if "x" in names:
        fxyz = np.column_stack([records["x"], records["y"], records["z"]]).astype(
            np.float64
        )
    else:
        fx, fy, fz = radec_to_cartesian(ra, dec)
        fxyz = np.column_stack([fx, fy, fz])

    rec_zone = zone_of(dec, h)
    dz = int(np.ceil(radius_deg / h - 1e-9))
    halfw = _ra_halfwidth_deg(dec, radius_deg)
    full_scan = halfw >= 180.0

    lo = np.where(full_scan, 0.0, ra - halfw)
    hi = np.where(full_scan, 360.0, ra + halfw)
    # Primary interval clipped into [0, 360]; the wrapped remainder becomes a
    # second interval on the other side of the seam.
    lo1 = np.maximum(lo, 0.0)
    hi1 = np.minimum(hi, 360.0)
    lo2 = np.where(lo < 0.0, lo + 360.0, np.where(hi > 360.0, 0.0, 0.0))
    hi2 = np.where(lo < 0.0, 360.0, np.where(hi > 360.0, hi - 360.0, 0.0))
    has2 = (lo < 0.0) | (hi > 360.0)

    key = template_index.key
    tpl_xyz = template_index.xyz
    rec_idx = np.arange(n)

    cand_rec_parts = []
    cand_tpl_parts = []

    def _collect(zk, mask, ivl_lo, ivl_hi):
        if not np.any(mask):
            return
        base = zk[mask].astype(np.float64) * 361.0
        rows = rec_idx[mask]
        starts = np.searchsorted(key, base + ivl_lo[mask], side="left")
        stops = np.searchsorted(key, base + ivl_hi[mask], side="right")
        lengths = stops - starts
        nonzero = lengths > 0
        if not np.any(nonzero):
            return
        rows = rows[nonzero]
        starts = starts[nonzero]
        lengths = lengths[nonzero]
        total = int(lengths.sum())
        offsets = np.zeros(len(lengths), dtype=np.int64)
        np.cumsum(lengths[:-1], out=offsets[1:])
        flat = np.arange(total, dtype=np.int64) - np.repeat(offsets, lengths)
        cand_tpl_parts.append(flat + np.repeat(starts, lengths))
        cand_rec_parts.append(np.repeat(rows, lengths))

    for d in range(-dz, dz + 1):
        zk = rec_zone + d
        valid = (zk >= 0) & (zk < nz)
        _collect(zk, valid, lo1, hi1)
        _collect(zk, valid & has2, lo2, hi2)

    if cand_rec_parts:
        cand_rec = np.concatenate(cand_rec_parts)
        cand_tpl = np.concatenate(cand_tpl_parts)
        diff = fxyz[cand_rec] - tpl_xyz[cand_tpl]
        chord2 = np.einsum("ij,ij->i", diff, diff)
        max_chord = separation_to_chord(radius_deg)
        in_radius = chord2 <= max_chord * max_chord
        cand_rec = cand_rec[in_radius]
        cand_tpl = cand_tpl[in_radius]
        chord2 = chord2[in_radius]
    else:
        cand_rec = np.zeros(0, np.int64)
        cand_tpl = np.zeros(0, np.int64)
        chord2 = np.zeros(0)

    if len(cand_rec):
        per_rec = np.bincount(cand_rec, minlength=n)
        ambiguous_count = int(np.count_nonzero(per_rec > 1))
        star = template_index.ids[cand_tpl]
        order = np.lexsort((star, chord2, cand_rec))
        rec_sorted = cand_rec[order]
        matched_rows, first = np.unique(rec_sorted, return_index=True)
        chosen = order[first]
        sep = np.degrees(
            2.0 * np.arcsin(np.minimum(1.0, np.sqrt(chord2[chosen]) / 2.0))
        )
        star_ids = star[chosen]
    else:
        ambiguous_count = 0
        matched_rows = np.zeros(0, np.int64)
        star_ids = np.zeros(0, np.int64)
        sep = np.zeros(0)

    matched_mask = np.zeros(n, dtype=bool)
    matched_mask[matched_rows] = True
    unmatched_rows = np.flatnonzero(~matched_mask)
    all_ids = records["id"]
    return MatchResult(
        record_ids=all_ids[matched_rows].astype(np.uint64),
        star_ids=star_ids,
        separations_deg=sep,
        unmatched_ids=all_ids[unmatched_rows].astype(np.uint64),
        matched_rows=matched_rows,
        unmatched_rows=unmatched_rows,
        ambiguous_count=ambiguous_count,
        n_frame=n,
    )


@dataclass
class ThroughputResult:
    """One cross-match benchmark measurement."""

    frame_size: int
    template_size: int
    radius_deg: float
    build_s: float
    join_s: float
    total_s: float
    records_per_s: float
    cadence_budget_s: float
    within_budget: bool

    def csv_row(self) -> str:
        return (
            f"{self.frame_size},{self.template_size},{self.radius_deg!r},"
            f"{self.build_s:.6f},{self.join_s:.6f},{self.total_s:.6f},"
            f"{self.records_per_s:.1f},{self.cadence_budget_s!r},{int(self.within_budget)}"
        )


THROUGHPUT_CSV_HEADER = (
    "frame_size,template_size,radius_deg,build_s,join_s,total_s,"
    "records_per_s,cadence_budget_s,within_budget"
)


def crossmatch_throughput(
    frame_size: int,
    template_size: int,
    radius_deg: float,
    config: EngineConfig | None = None,
    seed: int = 0,
) -> ThroughputResult:
    """Wall-clock the index build plus join on synthetic uniform fields."""
    config = config or EngineConfig()
    rng = np.random.default_rng(seed)

    def _field(n, id_offset):
        out = np.zeros(n, dtype=[("id", "<i8"), ("ra", "<f8"), ("dec", "<f8")])
        out["id"] = np.arange(n) + id_offset
        out["ra"] = rng.uniform(0.0, 60.0, n)
        out["dec"] = np.degrees(np.arcsin(rng.uniform(-0.5, 0.5, n)))
        return out

    template = _field(template_size, 0)
    frame = _field(frame_size, 1 << 40)

    t0 = time.perf_counter()
    index = build_zone_index(template, config.zone_height_deg)
    t1 = time.perf_counter()
    range_join(frame, index, radius_deg)
    t2 = time.perf_counter()

    total = t2 - t0
    return ThroughputResult(
        frame_size=frame_size,
        template_size=template_size,
        radius_deg=radius_deg,
        build_s=t1 - t0,
        join_s=t2 - t1,
        total_s=total,
        records_per_s=frame_size / total if total > 0 else float("inf"),
        cadence_budget_s=config.cadence_s,
        within_budget=total < config.cadence_s,
    )
