import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdcat.core import ConfigError, EngineConfig, records_from_radec, sort_by_zone_ra
from tdcat.crossmatch import (
    POLE_CLAMP_DEG,
    build_zone_index,
    crossmatch_throughput,
    range_join,
)

from oracles import brute_force_match, brute_force_match_arrays, haversine_deg

CFG = EngineConfig()


def make_records(ra, dec, ids=None, imageid=1):
    ra = np.asarray(ra, dtype=np.float64)
    dec = np.asarray(dec, dtype=np.float64)
    if ids is None:
        ids = np.arange(len(ra), dtype=np.uint64)
    rec = records_from_radec(
        ids=np.asarray(ids, dtype=np.uint64), imageid=imageid, ra=ra, dec=dec,
        mag=np.full(len(ra), 12.0), mag_error=np.full(len(ra), 0.02), config=CFG,
    )
    return sort_by_zone_ra(rec)


def assert_matches_oracle(frame_rec, tpl_rec, radius, zone_height=0.01):
    """range_join must agree exactly with the O(n*m) haversine oracle."""
    index = build_zone_index(tpl_rec, zone_height)
    result = range_join(frame_rec, index, radius)
    oracle = brute_force_match(
        frame_rec["ra"], frame_rec["dec"],
        tpl_rec["id"].astype(np.int64), tpl_rec["ra"], tpl_rec["dec"], radius,
    )
    got = {}
    for rid, sid, sep in result.pairs():
        got[rid] = sid
    want = {
        int(frame_rec["id"][i]): o[0] for i, o in enumerate(oracle) if o is not None
    }
    assert got == want
    want_unmatched = {
        int(frame_rec["id"][i]) for i, o in enumerate(oracle) if o is None
    }
    assert set(int(u) for u in result.unmatched_ids) == want_unmatched
    # separations agree with the independent haversine formula
    for row, sep in zip(result.matched_rows, result.separations_deg):
        i = int(row)
        sid = got[int(frame_rec["id"][i])]
        j = int(np.nonzero(tpl_rec["id"] == sid)[0][0])
        ref = haversine_deg(
            frame_rec["ra"][i], frame_rec["dec"][i],
            tpl_rec["ra"][j], tpl_rec["dec"][j],
        )
        assert sep == pytest.approx(ref, abs=1e-10)
    return result


# ---------------------------------------------------------------------------
# index structure


def test_zone_index_structure():
    rng = np.random.default_rng(0)
    rec = make_records(rng.uniform(0, 360, 500), rng.uniform(-89, 89, 500))
    idx = build_zone_index(rec, 0.01)
    assert idx.source_count == 500
    assert idx.zone_start[0] == 0 and idx.zone_start[-1] == 500
    assert np.all(np.diff(idx.zone_start) >= 0)
    # rows sorted by (zone, ra); ra ascending within each zone
    assert np.all(np.diff(idx.key) >= 0)
    for z, members in idx.zones().items():
        assert np.all(np.diff(idx.ra[members]) >= 0)
        assert np.all(idx.zone[members] == z)
    # zone recomputed from dec, not trusted from the input column
    tweaked = rec.copy()
    tweaked["zone"] += 5
    idx2 = build_zone_index(tweaked, 0.01)
    assert np.array_equal(idx2.zone, idx.zone)


def test_zone_index_empty():
    idx = build_zone_index(make_records([], []), 0.01)
    assert idx.source_count == 0
    result = range_join(make_records([10.0], [5.0]), idx, 0.003)
    assert result.n_matched == 0
    assert result.n_unmatched == 1


# ---------------------------------------------------------------------------
# randomized oracle equivalence


def test_randomized_instances_match_oracle():
    """Dense uniform fields of mixed sizes, zero tolerance vs brute force."""
    rng = np.random.default_rng(2024)
    for trial in range(12):
        n = int(rng.integers(1, 400))
        m = int(rng.integers(1, 400))
        # compact patch so matches actually occur
        ra0 = rng.uniform(0, 359)
        dec0 = rng.uniform(-60, 60)
        frame = make_records(
            (ra0 + rng.uniform(0, 0.5, n)) % 360.0,
            np.clip(dec0 + rng.uniform(0, 0.5, n), -90, 90),
        )
        tpl = make_records(
            (ra0 + rng.uniform(0, 0.5, m)) % 360.0,
            np.clip(dec0 + rng.uniform(0, 0.5, m), -90, 90),
        )
        radius = float(rng.choice([0.003, 0.01, 0.05]))
        assert_matches_oracle(frame, tpl, radius)


def test_zone_boundary_cases_match_oracle():
    """Sources within float epsilon of strip boundaries on both sides."""
    rng = np.random.default_rng(7)
    h = 0.01
    boundaries = rng.integers(-8000, 17000, 40) * h - 90.0
    eps = np.array([-1e-7, -1e-9, 0.0, 1e-9, 1e-7] * 8)
    dec = np.clip(boundaries + eps, -90.0, 90.0)
    ra = rng.uniform(10, 10.01, len(dec))
    frame = make_records(ra, dec)
    jitter = rng.normal(0, 5e-4, len(dec))
    tpl = make_records(ra, np.clip(dec + jitter, -90, 90))
    assert_matches_oracle(frame, tpl, 0.003, zone_height=h)


def test_ra_seam_cases_match_oracle():
    """Pairs straddling RA 0/360 must still match across the seam."""
    rng = np.random.default_rng(8)
    n = 120
    ra = np.concatenate([rng.uniform(359.995, 360.0, n // 2),
                         rng.uniform(0.0, 0.005, n // 2)])
    dec = rng.uniform(-30, 30, n)
    frame = make_records(ra, dec)
    shift = rng.normal(0, 1.5e-3, n)
    tpl = make_records((ra + shift) % 360.0, dec)
    result = assert_matches_oracle(frame, tpl, 0.003)
    assert result.n_matched > n // 2  # the seam did not suppress matches


def test_near_pole_cases_match_oracle():
    """Above the pole clamp the RA window degenerates to a full scan."""
    rng = np.random.default_rng(9)
    n = 80
    dec = np.concatenate([
        rng.uniform(89.9, 90.0, n // 2),
        rng.uniform(-90.0, -89.9, n // 2),
    ])
    ra = rng.uniform(0, 360, n)
    frame = make_records(ra, dec)
    tpl = make_records(
        rng.uniform(0, 360, n),
        np.clip(dec + rng.normal(0, 5e-4, n), -90, 90),
    )
    assert_matches_oracle(frame, tpl, 0.01)
    assert POLE_CLAMP_DEG == 89.9


@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_random_fields_property(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(0, 60)), int(rng.integers(0, 60))
    frame = make_records(rng.uniform(0, 360, n), rng.uniform(-90, 90, n))
    tpl = make_records(rng.uniform(0, 360, m), rng.uniform(-90, 90, m))
    assert_matches_oracle(frame, tpl, float(rng.uniform(0.001, 5.0)))


# ---------------------------------------------------------------------------
# tie-breaking and ambiguity


def test_exact_tie_breaks_to_smaller_id():
    # two template stars symmetric about the frame record in RA
    frame = make_records([180.0], [0.0])
    tpl = make_records([180.0 - 1e-3, 180.0 + 1e-3], [0.0, 0.0], ids=[41, 17])
    index = build_zone_index(tpl, 0.01)
    result = range_join(frame, index, 0.003)
    assert result.n_matched == 1
    assert int(result.star_ids[0]) == 17


def test_ambiguity_counts_multi_candidate_records():
    # a frame record is ambiguous when several template stars sit in radius
    frame = make_records([100.0, 200.0], [10.0, 10.0])
    tpl = make_records([100.0 - 1e-3, 100.0 + 1e-3, 200.0], [10.0, 10.0, 10.0],
                       ids=[1, 2, 3])
    index = build_zone_index(tpl, 0.01)
    result = range_join(frame, index, 0.003)
    assert result.n_matched == 2
    assert result.ambiguous_count == 1


def test_shared_star_is_not_ambiguous():
    # two frame records nearest the same lone star: matched twice, but each
    # record saw a single candidate, so no ambiguity is flagged
    frame = make_records([100.0, 100.0006], [10.0, 10.0])
    tpl = make_records([100.0003], [10.0], ids=[5])
    index = build_zone_index(tpl, 0.01)
    result = range_join(frame, index, 0.003)
    assert result.n_matched == 2
    assert set(result.star_ids) == {5}
    assert result.ambiguous_count == 0


def test_matched_rows_are_frame_ordered():
    rng = np.random.default_rng(3)
    frame = make_records(rng.uniform(50, 50.2, 100), rng.uniform(-5, -4.8, 100))
    tpl = make_records(rng.uniform(50, 50.2, 100), rng.uniform(-5, -4.8, 100))
    result = range_join(frame, build_zone_index(tpl, 0.01), 0.05)
    assert np.all(np.diff(result.matched_rows) > 0)
    assert np.all(np.diff(result.unmatched_rows) > 0)
    together = np.sort(np.concatenate([result.matched_rows, result.unmatched_rows]))
    assert np.array_equal(together, np.arange(len(frame)))


def test_radius_validation():
    tpl = make_records([10.0], [0.0])
    index = build_zone_index(tpl, 0.01)
    frame = make_records([10.0], [0.0])
    for bad in (0.0, -1.0, 90.1):
        with pytest.raises(ConfigError):
            range_join(frame, index, bad)


def test_generous_radius_matches_everything():
    rng = np.random.default_rng(11)
    frame = make_records(rng.uniform(0, 360, 50), rng.uniform(-90, 90, 50))
    tpl = make_records(rng.uniform(0, 360, 20), rng.uniform(-90, 90, 20))
    result = range_join(frame, build_zone_index(tpl, 0.01), 90.0)
    # a 90 degree radius cannot reach antipodal stars, but with 20 spread
    # template stars every frame record has someone within 90 degrees
    assert result.n_matched == 50


def test_oracle_implementations_agree():
    # the vectorized oracle must stay interchangeable with the pure-python
    # one (same nearest-in-radius, ties-to-smaller-id contract), since the
    # big randomized sweeps rely on the fast version
    rng = np.random.default_rng(77)
    for _ in range(5):
        n, m = rng.integers(1, 60, 2)
        f_ra = rng.uniform(0, 0.2, n) % 360.0
        f_dec = rng.uniform(-0.1, 0.1, n)
        t_ra = rng.uniform(0, 0.2, m)
        t_dec = rng.uniform(-0.1, 0.1, m)
        ids = np.arange(m, dtype=np.int64)
        rng.shuffle(ids)
        slow = brute_force_match(f_ra, f_dec, ids, t_ra, t_dec, 0.05)
        fast = brute_force_match_arrays(f_ra, f_dec, ids, t_ra, t_dec, 0.05)
        assert len(slow) == len(fast) == n
        for s, f in zip(slow, fast):
            if s is None:
                assert f is None
            else:
                assert f is not None and s[0] == f[0]
                assert f[1] == pytest.approx(s[1], rel=1e-12, abs=1e-15)


# ---------------------------------------------------------------------------
# throughput harness


def test_crossmatch_throughput_smoke():
    r = crossmatch_throughput(2000, 2000, 0.003, CFG, seed=1)
    assert r.frame_size == 2000 and r.template_size == 2000
    assert r.build_s > 0 and r.join_s > 0
    assert r.total_s == pytest.approx(r.build_s + r.join_s)
    assert r.records_per_s == pytest.approx(2000 / r.total_s, rel=1e-6)
    assert r.cadence_budget_s == CFG.cadence_s
    assert r.within_budget is (r.join_s < CFG.cadence_s)
