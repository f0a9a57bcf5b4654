"""Domain types and photometric/astrometric conversions shared by every module.

The record layout mirrors the 22-column catalog row produced by point-source
extraction: one row per detected star per frame.  All angular quantities are
degrees; magnitudes are instrumental unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

# One observing night is 8 hours of continuous cadence.
NIGHT_SECONDS = 8 * 3600

# Boundary-safe zone arithmetic: (dec+90)/h lands a hair below integer
# boundaries in floating point (e.g. 90/0.01 -> 8999.999...), so floor()
# alone would misplace sources sitting exactly on a strip boundary.
_ZONE_EPS = 1e-9

# Column order is the catalog row order and also the serialized record order.
TABLE2_FIELDS = [
    ("id", "<u8"),
    ("imageid", "<i4"),
    ("zone", "<i2"),
    ("ra", "<f8"),
    ("dec", "<f8"),
    ("mag", "<f8"),
    ("mag_error", "<f8"),
    ("pixel_x", "<f8"),
    ("pixel_y", "<f8"),
    ("ra_err", "<f8"),
    ("dec_err", "<f8"),
    ("x", "<f8"),
    ("y", "<f8"),
    ("z", "<f8"),
    ("flux", "<f8"),
    ("flux_err", "<f8"),
    ("calmag", "<f8"),
    ("flag", "<i4"),
    ("background", "<f8"),
    ("threshold", "<f8"),
    ("ellipticity", "<f8"),
    ("class_star", "<f8"),
]
TABLE2_COLUMNS = [name for name, _ in TABLE2_FIELDS]
RECORD_DTYPE = np.dtype(TABLE2_FIELDS)

PIXELS_PER_AXIS = 4096.0


class EngineError(Exception):
    """Base class for all engine errors."""


class ConfigError(EngineError):
    """Invalid configuration value or combination."""


class DomainError(EngineError):
    """Input outside its documented domain."""


class CadenceError(EngineError):
    """Epoch not aligned to the exposure cadence grid."""


class SequenceError(EngineError):
    """Out-of-order epoch where strict ordering is required."""


class StorageError(EngineError):
    """On-disk store failure."""


class InsufficientDataError(EngineError):
    """Operation needs more points than the input provides."""


@dataclass(frozen=True)
class EngineConfig:
    """Engine-wide knobs.

    cadence_s        exposure cadence, seconds
    zone_height_deg  declination strip height used for the spatial index
    match_radius_deg cross-match association radius
    mag_zero_point   photometric zero point (flux scale convention only)
    cameras          number of shared-nothing partitions
    sources_per_frame generator density per camera per exposure
    """

    cadence_s: float = 15.0
    zone_height_deg: float = 0.01
    match_radius_deg: float = 0.003
    mag_zero_point: float = 25.0
    cameras: int = 36
    sources_per_frame: int = 175_600

    def __post_init__(self):
        if not self.cadence_s > 0:
            raise ConfigError(f"cadence_s must be > 0, got {self.cadence_s}")
        if not 0 < self.zone_height_deg <= 90:
            raise ConfigError(
                f"zone_height_deg must be in (0, 90], got {self.zone_height_deg}"
            )
        if not self.match_radius_deg > 0:
            raise ConfigError(
                f"match_radius_deg must be > 0, got {self.match_radius_deg}"
            )
        if self.cameras < 1:
            raise ConfigError(f"cameras must be >= 1, got {self.cameras}")
        if self.sources_per_frame < 0:
            raise ConfigError(
                f"sources_per_frame must be >= 0, got {self.sources_per_frame}"
            )

    @property
    def n_zones(self) -> int:
        return n_zones(self.zone_height_deg)

    @property
    def frames_per_night(self) -> int:
        return int(round(NIGHT_SECONDS / self.cadence_s))


def n_zones(zone_height_deg: float) -> int:
    """Number of declination strips covering [-90, +90]."""
    if not zone_height_deg > 0:
        raise ConfigError(f"zone_height_deg must be > 0, got {zone_height_deg}")
    return int(math.ceil(180.0 / zone_height_deg - _ZONE_EPS))


def zone_of(dec, zone_height_deg: float):
    """Declination strip id: floor((dec + 90) / h), with +90 clamped into the top strip.

    Accepts scalars or arrays; returns int64 of the same shape.
    """
    nz = n_zones(zone_height_deg)
    dec_arr = np.asarray(dec, dtype=np.float64)
    if np.any(dec_arr < -90.0) or np.any(dec_arr > 90.0):
        raise DomainError(f"dec must be in [-90, 90], got {dec}")
    z = np.floor((dec_arr + 90.0) / zone_height_deg + _ZONE_EPS).astype(np.int64)
    z = np.clip(z, 0, nz - 1)
    return int(z) if np.isscalar(dec) else z


def radec_to_cartesian(ra, dec):
    """(ra, dec) degrees -> unit-sphere (x, y, z).

    x = cos(dec) cos(ra), y = cos(dec) sin(ra), z = sin(dec).
    """
    ra_arr = np.asarray(ra, dtype=np.float64)
    dec_arr = np.asarray(dec, dtype=np.float64)
    if np.any(ra_arr < 0.0) or np.any(ra_arr >= 360.0):
        raise DomainError(f"ra must be in [0, 360), got {ra}")
    if np.any(dec_arr < -90.0) or np.any(dec_arr > 90.0):
        raise DomainError(f"dec must be in [-90, 90], got {dec}")
    ra_r = np.radians(ra_arr)
    dec_r = np.radians(dec_arr)
    cd = np.cos(dec_r)
    x = cd * np.cos(ra_r)
    y = cd * np.sin(ra_r)
    z = np.sin(dec_r)
    if np.isscalar(ra) and np.isscalar(dec):
        return float(x), float(y), float(z)
    return x, y, z


def cartesian_to_radec(x, y, z):
    """Inverse of radec_to_cartesian for unit vectors; ra in [0, 360)."""
    ra = np.degrees(np.arctan2(y, x)) % 360.0
    dec = np.degrees(np.arcsin(np.clip(z, -1.0, 1.0)))
    if np.isscalar(x):
        return float(ra), float(dec)
    return ra, dec


def _unit_vector(obj):
    if isinstance(obj, SourceRecord):
        return np.array([obj.x, obj.y, obj.z])
    if isinstance(obj, np.void):  # structured-array row
        return np.array([obj["x"], obj["y"], obj["z"]])
    ra, dec = obj
    return np.array(radec_to_cartesian(ra, dec))


def angular_separation(a, b) -> float:
    """Great-circle separation in degrees between two directions.

    Each argument is a SourceRecord, a structured record row, or an
    (ra, dec) pair in degrees.  Computed from the chord length,
    2*arcsin(|va - vb| / 2), which is well conditioned at small angles.
    """
    va = _unit_vector(a)
    vb = _unit_vector(b)
    chord = np.linalg.norm(va - vb)
    return float(np.degrees(2.0 * np.arcsin(min(1.0, chord / 2.0))))


def separation_to_chord(sep_deg):
    """Chord length on the unit sphere subtending a given angle in degrees."""
    return 2.0 * np.sin(np.radians(sep_deg) / 2.0)


def mag_to_flux(mag, zero_point: float):
    """Linear flux for an instrumental magnitude: 10**(-0.4 (mag - zp))."""
    return 10.0 ** (-0.4 * (np.asarray(mag, dtype=np.float64) - zero_point))


def propagate_flux_error(flux, mag_error):
    """First-order flux error: 0.4 ln(10) * flux * mag_error."""
    mag_error_arr = np.asarray(mag_error, dtype=np.float64)
    if np.any(mag_error_arr < 0):
        raise DomainError(f"mag_error must be >= 0, got {mag_error}")
    out = 0.4 * math.log(10.0) * np.asarray(flux, dtype=np.float64) * mag_error_arr
    return float(out) if np.isscalar(mag_error) else out


@dataclass(frozen=True)
class SourceRecord:
    """One extracted star measurement; the full catalog row."""

    id: int
    imageid: int
    zone: int
    ra: float
    dec: float
    mag: float
    mag_error: float
    pixel_x: float
    pixel_y: float
    ra_err: float
    dec_err: float
    x: float
    y: float
    z: float
    flux: float
    flux_err: float
    calmag: float
    flag: int
    background: float
    threshold: float
    ellipticity: float
    class_star: float

    @classmethod
    def from_row(cls, row) -> "SourceRecord":
        return cls(**{name: row[name].item() for name in TABLE2_COLUMNS})

    def to_row(self) -> np.ndarray:
        out = np.zeros(1, dtype=RECORD_DTYPE)
        for f in fields(self):
            out[f.name] = getattr(self, f.name)
        return out[0]

    def validate(self, zone_height_deg: float, mag_zero_point: float) -> None:
        """Raise DomainError if any record invariant is violated."""
        problems = []
        if not (0.0 <= self.ra < 360.0):
            problems.append(f"ra={self.ra} outside [0, 360)")
        if not (-90.0 <= self.dec <= 90.0):
            problems.append(f"dec={self.dec} outside [-90, 90]")
        norm2 = self.x * self.x + self.y * self.y + self.z * self.z
        if abs(norm2 - 1.0) > 1e-9:
            problems.append(f"|xyz|^2={norm2} deviates from 1")
        if self.zone != zone_of(self.dec, zone_height_deg):
            problems.append(
                f"zone={self.zone} != zone_of({self.dec}, {zone_height_deg})"
            )
        expected_flux = float(mag_to_flux(self.mag, mag_zero_point))
        if abs(self.flux - expected_flux) > 1e-9 * max(abs(expected_flux), 1e-300):
            problems.append(f"flux={self.flux} inconsistent with mag={self.mag}")
        for name in ("pixel_x", "pixel_y"):
            v = getattr(self, name)
            if not (0.0 <= v < PIXELS_PER_AXIS):
                problems.append(f"{name}={v} outside [0, {PIXELS_PER_AXIS})")
        if self.mag_error < 0:
            problems.append(f"mag_error={self.mag_error} negative")
        if self.ra_err < 0 or self.dec_err < 0:
            problems.append("negative positional error")
        if not (0.0 <= self.ellipticity <= 1.0):
            problems.append(f"ellipticity={self.ellipticity} outside [0, 1]")
        if not (0.0 <= self.class_star <= 1.0):
            problems.append(f"class_star={self.class_star} outside [0, 1]")
        if problems:
            raise DomainError("invalid SourceRecord: " + "; ".join(problems))


def records_from_radec(
    ids,
    imageid: int,
    ra,
    dec,
    mag,
    mag_error,
    config: EngineConfig,
    pixel_x=None,
    pixel_y=None,
    ra_err=0.0,
    dec_err=0.0,
    flag=0,
    background=0.0,
    threshold=0.0,
    ellipticity=0.0,
    class_star=1.0,
) -> np.ndarray:
    """Assemble full catalog rows from observed (ra, dec, mag).

    Derived columns (zone, x/y/z, flux, flux_err, calmag) are computed here so
    every emitted record satisfies the row invariants by construction.  calmag
    is the instrumental mag passed through unchanged (no calibration model).
    """
    ra = np.asarray(ra, dtype=np.float64)
    dec = np.asarray(dec, dtype=np.float64)
    n = ra.size
    out = np.zeros(n, dtype=RECORD_DTYPE)
    out["id"] = ids
    out["imageid"] = imageid
    out["ra"] = ra
    out["dec"] = dec
    out["zone"] = zone_of(dec, config.zone_height_deg)
    x, y, z = radec_to_cartesian(ra, dec)
    out["x"], out["y"], out["z"] = x, y, z
    out["mag"] = mag
    out["mag_error"] = mag_error
    out["calmag"] = out["mag"]
    out["flux"] = mag_to_flux(out["mag"], config.mag_zero_point)
    out["flux_err"] = propagate_flux_error(out["flux"], out["mag_error"])
    if pixel_x is None:
        pixel_x = np.zeros(n)
    if pixel_y is None:
        pixel_y = np.zeros(n)
    out["pixel_x"] = np.clip(pixel_x, 0.0, np.nextafter(PIXELS_PER_AXIS, 0.0))
    out["pixel_y"] = np.clip(pixel_y, 0.0, np.nextafter(PIXELS_PER_AXIS, 0.0))
    out["ra_err"] = ra_err
    out["dec_err"] = dec_err
    out["flag"] = flag
    out["background"] = background
    out["threshold"] = threshold
    out["ellipticity"] = ellipticity
    out["class_star"] = class_star
    return out


def sort_by_zone_ra(records: np.ndarray) -> np.ndarray:
    """Stable (zone, ra) ordering used for every emitted batch."""
    order = np.lexsort((records["ra"], records["zone"]))
    return records[order]


@dataclass
class FrameBatch:
    """All records extracted from one camera exposure."""

    camera_id: int
    imageid: int
    epoch: float
    records: np.ndarray  # RECORD_DTYPE, sorted by (zone, ra)

    def __len__(self) -> int:
        return len(self.records)

    def check(self, config: EngineConfig) -> None:
        """Raise DomainError on batch-level invariant violations."""
        r = self.records
        if len(r) and not np.all(r["imageid"] == self.imageid):
            raise DomainError("records carry mixed imageids")
        key = r["zone"].astype(np.float64) * 361.0 + r["ra"]
        if len(r) > 1 and np.any(np.diff(key) < 0):
            raise DomainError("records not sorted by (zone, ra)")
        if not (0 <= self.camera_id < config.cameras):
            raise DomainError(
                f"camera_id={self.camera_id} outside [0, {config.cameras})"
            )
