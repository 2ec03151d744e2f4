import math

import numpy as np
import pytest
from helpers import noise_free_config, truth_map
from hypothesis import given, settings
from hypothesis import strategies as st

from uwbcal.factors import RangeMeasurement
from uwbcal.simulator import REFERENCE_ANCHORS, REFERENCE_GAUGE, generate
from uwbcal.trilateration import (
    AnchorMap,
    FixStream,
    InconsistentRanges,
    InsufficientRanges,
    load_range_matrix,
    self_calibrate_anchors,
    trilaterate_tag,
    uwb_fix_stream,
)

BOX = AnchorMap([1, 2, 3, 4], np.array([[0, 0, 0], [4, 0, 0], [0, 3, 0], [4, 3, 1.0]]), None)


def ranges_from(anchors: AnchorMap, p):
    return [(a, float(np.linalg.norm(x - p))) for a, x in zip(anchors.ids, anchors.positions)]


def distance_matrix(P):
    P = np.asarray(P, dtype=float)
    return np.linalg.norm(P[:, None] - P[None], axis=2)


# --- trilaterate_tag ---------------------------------------------------------


def test_recovers_generating_point():
    p = np.array([2.0, 1.5, 0.5])
    est, rms = trilaterate_tag(ranges_from(BOX, p), BOX)
    assert np.allclose(est, p, atol=1e-6)
    assert rms < 1e-9


def test_square_center_with_fixed_height():
    sq = AnchorMap([1, 2, 3, 4], np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]), None)
    r = [(a, math.sqrt(0.5)) for a in sq.ids]
    est, _ = trilaterate_tag(r, sq, fixed_z=0.0)
    assert np.allclose(est, [0.5, 0.5, 0.0], atol=1e-9)


def test_two_ranges_insufficient():
    with pytest.raises(InsufficientRanges):
        trilaterate_tag([(1, 1.0), (2, 2.0)], BOX)


def test_unknown_and_nonpositive_ranges_ignored():
    p = np.array([1.0, 1.0, 0.3])
    r = ranges_from(BOX, p)[:3] + [(99, 1.0), (4, -1.0)]
    with pytest.raises(InsufficientRanges):
        trilaterate_tag(r[:2] + r[3:], BOX)
    est, _ = trilaterate_tag(r, BOX, initial_guess=p + 0.1)
    assert np.allclose(est, p, atol=1e-6)


def test_collinear_anchors_rejected():
    line = AnchorMap([1, 2, 3], np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), None)
    with pytest.raises(InsufficientRanges):
        trilaterate_tag([(1, 1.0), (2, 1.0), (3, 1.5)], line)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.2, 3.8), st.floats(0.2, 2.8), st.floats(0.0, 1.8))
def test_noise_free_recovery_property(x, y, z):
    # reference layout has distinct heights, so the anchors are not coplanar
    anchors = truth_map()
    p = np.array([x, y, z])
    est, _ = trilaterate_tag(ranges_from(anchors, p), anchors)
    assert np.allclose(est, p, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.2, 3.8), st.floats(0.2, 2.8), st.floats(-1.0, 3.0))
def test_fixed_height_recovery_property(x, y, z):
    anchors = truth_map()
    p = np.array([x, y, z])
    est, _ = trilaterate_tag(ranges_from(anchors, p), anchors, fixed_z=z)
    assert np.allclose(est, p, atol=1e-6)


# --- self_calibrate_anchors --------------------------------------------------


def test_self_calibration_reference_layout():
    P = np.array(REFERENCE_ANCHORS)
    gauge = AnchorMap([1, 2, 3, 4], P * 0 + [0, 0, 0], np.array(REFERENCE_GAUGE))
    out = self_calibrate_anchors(distance_matrix(P), gauge, P[:, 2])
    assert np.allclose(out.positions, P, atol=1e-6)
    assert out.ids == [1, 2, 3, 4]
    assert np.array_equal(out.fixed, gauge.fixed)


def test_self_calibration_equilateral_with_apex():
    s = 2.0
    P = np.array([[0, 0, 1.0], [s * 0.5, s * math.sqrt(3) / 2, 1.0], [s, 0, 1.0], [s * 0.5, s * math.sqrt(3) / 6, 2.5]])
    gauge = AnchorMap([1, 2, 3, 4], np.zeros((4, 3)), np.array(REFERENCE_GAUGE))
    out = self_calibrate_anchors(distance_matrix(P), gauge, P[:, 2])
    assert np.allclose(out.positions, P, atol=1e-9)


def test_self_calibration_averages_repeats():
    P = np.array(REFERENCE_ANCHORS)
    gauge = AnchorMap([1, 2, 3, 4], np.zeros((4, 3)), np.array(REFERENCE_GAUGE))
    D = distance_matrix(P)
    bump = np.zeros_like(D)
    bump[0, 2] = bump[2, 0] = 0.02
    out = self_calibrate_anchors([D + bump, D - bump], gauge, P[:, 2])
    one = self_calibrate_anchors(D + bump, gauge, P[:, 2])
    assert abs(out.positions[2, 0] - P[2, 0]) < abs(one.positions[2, 0] - P[2, 0])


def test_self_calibration_inconsistent():
    P = np.array(REFERENCE_ANCHORS)
    D = distance_matrix(P)
    D[0, 1] *= 2
    D[1, 0] *= 2
    gauge = AnchorMap([1, 2, 3, 4], np.zeros((4, 3)), np.array(REFERENCE_GAUGE))
    with pytest.raises(InconsistentRanges):
        self_calibrate_anchors(D, gauge, P[:, 2])


def test_self_calibration_clips_short_range(caplog):
    P = np.array(REFERENCE_ANCHORS)
    D = distance_matrix(P)
    # anchors 1 and 2 are 1.10 m apart in height; 3.0 m in the plane
    D[0, 1] = D[1, 0] = 1.0
    gauge = AnchorMap([1, 2, 3, 4], np.zeros((4, 3)), np.array(REFERENCE_GAUGE))
    with caplog.at_level("WARNING"):
        try:
            self_calibrate_anchors(D, gauge, P[:, 2], slack=10.0)
        except InconsistentRanges:
            pass
    assert any("clip" in r.message for r in caplog.records)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(1.0, 6.0), st.floats(1.0, 6.0), st.floats(1.0, 6.0),
    st.floats(0.0, 1.0), st.lists(st.floats(0.0, 3.0), min_size=4, max_size=4),
)
def test_self_calibration_exact_property(x3, x4, y2, skew, heights):
    # anchor 2 off the x axis, anchor 3 on it, anchor 4 elsewhere
    P = np.array([[0, 0, 0], [skew, y2, 0], [x3, 0, 0], [x4, y2 + skew, 0.0]])
    P[:, 2] = heights
    gauge = AnchorMap([1, 2, 3, 4], np.zeros((4, 3)), np.array(REFERENCE_GAUGE))
    out = self_calibrate_anchors(distance_matrix(P), gauge, P[:, 2])
    assert np.allclose(out.positions, P, atol=1e-6)


def test_range_matrix_file(tmp_path):
    D = distance_matrix(REFERENCE_ANCHORS)
    path = tmp_path / "anchors.txt"
    np.savetxt(path, D)
    assert np.allclose(load_range_matrix(path), D)
    path.write_text("1 2 3\n4 5 6\n")
    with pytest.raises(ValueError):
        load_range_matrix(path)


# --- fix stream --------------------------------------------------------------


def test_fix_stream_noise_free_matches_truth():
    cfg = noise_free_config()
    cfg.trajectory.waypoints = [[0.5, 0.5, 0.25], [3.5, 2.5, 0.25]]
    cfg.trajectory.closed = False
    cfg.duration = 5.0
    ds = generate(cfg)
    fixes = uwb_fix_stream(ds.ranges, ds.truth_anchors)
    assert len(fixes) == len({m.timestamp for m in ds.ranges})
    for f in fixes:
        assert np.allclose(f.position, ds.ground_truth_at(f.timestamp).translation, atol=1e-6)
    ts = [f.timestamp for f in fixes]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_fix_stream_gap_and_threshold():
    anchors = truth_map()
    p = np.array([2.0, 1.0, 0.25])
    ranges = []
    for k in range(100):
        t = 0.1 * k
        if 3.0 <= t <= 8.0:
            continue
        ids = anchors.ids if k % 2 == 0 else anchors.ids[:2]
        ranges += [RangeMeasurement(t, a, float(np.linalg.norm(anchors.position(a) - p))) for a in ids]
    stream = FixStream(anchors)
    fixes = stream.process(ranges)
    ts = np.array([f.timestamp for f in fixes])
    assert not np.any((ts > 2.95) & (ts < 8.05))
    assert np.any(ts > 8.05)
    # odd epochs carry only two anchors
    assert all(round(t * 10) % 2 == 0 for t in ts)
    assert stream.skipped_epochs == sum(1 for k in range(100) if k % 2 and not 3.0 <= 0.1 * k <= 8.0)


def test_fix_timestamps_inside_epochs():
    anchors = truth_map()
    p = np.array([1.0, 2.0, 0.5])
    ranges = [RangeMeasurement(0.01 * k, anchors.ids[k % 4], float(np.linalg.norm(anchors.positions[k % 4] - p)))
              for k in range(200)]
    fixes = FixStream(anchors, window=0.1).process(ranges)
    for f in fixes:
        epoch = [m.timestamp for m in ranges if abs(m.timestamp - f.timestamp) < 0.1]
        assert min(epoch) <= f.timestamp <= max(epoch)
    assert len(fixes) == 20


def test_anchor_map_invariants():
    with pytest.raises(ValueError):
        AnchorMap([1, 1], np.zeros((2, 3)), None)
    m = truth_map()
    moved = m.with_positions(m.positions + 1.0)
    assert np.array_equal(moved.positions[m.fixed], m.positions[m.fixed])
    assert [n for n, _, _ in m.free_scalars()] == ["x2", "y2", "x3", "x4", "y4"]
