"""Independent reference implementations used to pin expected values.

Everything here deliberately avoids the engine's code paths: separations use
the haversine formula (not the chord), matching is an O(n*m) scan, and the
window statistics use the statistics module rather than numpy.  Expected
values asserted in the tests come from these, so a shared bug in the package
cannot silently validate itself.
"""

from __future__ import annotations

import math
import statistics


def haversine_deg(ra1, dec1, ra2, dec2) -> float:
    """Great-circle separation in degrees via the haversine formula."""
    p1, p2 = math.radians(dec1), math.radians(dec2)
    dphi = p2 - p1
    dlam = math.radians(ra2 - ra1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2.0) ** 2
    return math.degrees(2.0 * math.asin(min(1.0, math.sqrt(a))))


def brute_force_match(frame_ra, frame_dec, tpl_ids, tpl_ra, tpl_dec, radius_deg):
    """Nearest in-radius template star per frame row; ties -> smaller id.

    Returns a list the length of the frame: (star_id, separation_deg) for
    matched rows, None for unmatched.  Pure python loops on purpose.
    """
    out = []
    m = len(tpl_ids)
    for i in range(len(frame_ra)):
        best = None
        for j in range(m):
            sep = haversine_deg(frame_ra[i], frame_dec[i], tpl_ra[j], tpl_dec[j])
            if sep > radius_deg:
                continue
            if (
                best is None
                or sep < best[1]
                or (sep == best[1] and tpl_ids[j] < best[0])
            ):
                best = (int(tpl_ids[j]), sep)
        out.append(best)
    return out


def brute_force_match_arrays(frame_ra, frame_dec, tpl_ids, tpl_ra, tpl_dec, radius_deg):
    """Vectorized O(n*m) haversine matcher for larger oracle instances.

    Same contract as :func:`brute_force_match` (nearest in radius, ties to
    the smaller id) but runs the full pairwise separation matrix in numpy so
    thousand-row instances stay fast.  Still entirely independent of the
    engine: no zones, no chord distances, no sorted-key lookups.
    """
    import numpy as np

    n, m = len(frame_ra), len(tpl_ids)
    if n == 0 or m == 0:
        return [None] * n
    lat1 = np.radians(np.asarray(frame_dec, float))[:, None]
    lat2 = np.radians(np.asarray(tpl_dec, float))[None, :]
    dlam = np.radians(np.asarray(tpl_ra, float))[None, :] - np.radians(
        np.asarray(frame_ra, float)
    )[:, None]
    a = (
        np.sin((lat2 - lat1) / 2.0) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin(dlam / 2.0) ** 2
    )
    sep = np.degrees(2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))
    ids = np.asarray(tpl_ids)
    out = []
    for i in range(n):
        row = sep[i]
        j = np.lexsort((ids, row))[0]  # nearest first, then smallest id
        if row[j] <= radius_deg:
            out.append((int(ids[j]), float(row[j])))
        else:
            out.append(None)
    return out


class PureWindow:
    """Scalar sliding-window detector mirror built on the statistics module."""

    def __init__(self, window, min_window, k_sigma):
        self.window = window
        self.min_window = min_window
        self.k_sigma = k_sigma
        self.values = []

    def step(self, mag, mag_error):
        """Returns (kind or None, baseline_mean or None) then absorbs mag."""
        result = (None, None)
        if len(self.values) >= self.min_window:
            mean = statistics.fmean(self.values)
            var = statistics.variance(self.values)
            combined = math.sqrt(var + mag_error * mag_error)
            if abs(mag - mean) > self.k_sigma * combined:
                result = ("dimming" if mag > mean else "brightening", mean)
        self.values.append(mag)
        if len(self.values) > self.window:
            self.values.pop(0)
        return result


def flux_of(mag, zero_point) -> float:
    return 10.0 ** (-0.4 * (mag - zero_point))


def zone_by_fraction(dec: float, height_num: int, height_den: int) -> int:
    """Exact-rational zone id for h = height_num / height_den degrees.

    Exactness sidesteps every binary-float boundary artifact, which is the
    point: the engine must land boundary declinations in the strip the
    decimal arithmetic says they belong to.
    """
    from fractions import Fraction

    h = Fraction(height_num, height_den)
    q = (Fraction(dec).limit_denominator(10**12) + 90) / h
    z = math.floor(q)
    n = math.ceil(Fraction(180) / h)
    return min(max(z, 0), n - 1)
