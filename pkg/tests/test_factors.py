import numpy as np
import pytest
from helpers import FACTOR_TYPES, jacobian_errors

from uwbcal import factors as F
from uwbcal.fgo import Loss, Problem, solve
from uwbcal.geometry import Pose, Rotation3, compose, inverse, random_pose, se3_exp, transform_point


@pytest.mark.parametrize("kind", FACTOR_TYPES)
def test_analytic_jacobians_match_central_differences(kind):
    analytic, half = jacobian_errors(kind, n=100, seed=11)
    assert analytic < 1e-4
    assert half < 1e-4


def test_relative_pose_zero_at_consistent_motion():
    rng = np.random.default_rng(0)
    a, b = random_pose(rng), random_pose(rng)
    # estimates equal to the measurements up to a common left transform
    G = random_pose(rng)
    r = F.relative_pose_residual(compose(G, a), compose(G, b), a, b)
    assert np.allclose(r, 0.0, atol=1e-12)


def test_relative_pose_sees_increment_error():
    a = Pose.identity()
    b = Pose(Rotation3.identity(), [1.0, 0.0, 0.0])
    b_est = Pose(Rotation3.identity(), [1.2, 0.0, 0.0])
    r = F.relative_pose_residual(a, b_est, a, b)
    # ω part zero, translation part -0.2 along x in the k-1 body frame
    assert np.allclose(r, [0, 0, 0, -0.2, 0, 0], atol=1e-12)


def test_uwb_and_frame_residuals():
    T = Pose(Rotation3.about_z(np.pi / 2), [1.0, 2.0, 0.0])
    fix = F.UwbFix(0.0, [1.0, 3.0, 0.5])
    assert np.allclose(F.uwb_position_residual(T, fix), [0.0, 1.0, 0.5])
    q = np.array([1.0, 0.0, 0.0])
    # R q = (0, 1, 0), + t = (1, 3, 0)
    assert np.allclose(F.frame_transform_residual(T, fix, q), [0.0, 0.0, 0.5])
    assert np.allclose(transform_point(T, q), [1.0, 3.0, 0.0])


def test_range_residual_and_coincidence():
    m = F.RangeMeasurement(0.0, 1, 5.0)
    assert F.range_residual([3.0, 4.0, 0.0], [0.0, 0.0, 0.0], m) == pytest.approx(0.0)
    diag = F.Diagnostics()
    J = F.range_jacobian([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], diag)
    assert np.array_equal(J, np.zeros((1, 3))) and diag.range_coincidences == 1


def test_measurement_validation():
    with pytest.raises(ValueError):
        F.RangeMeasurement(0.0, 1, 0.0)
    with pytest.raises(ValueError):
        F.UwbFix(0.0, [np.nan, 0.0, 0.0])


def test_associate():
    ts = np.array([0.0, 0.1, 0.2, 0.3])
    assert F.associate(ts, 0.14) == 1
    assert F.associate(ts, 0.15) == 1  # tie goes to the earlier stamp
    assert F.associate(ts, 0.5) is None
    assert F.associate(np.array([]), 0.0) is None
    q = np.array([0.14, 0.15, 0.5, -0.05, 0.26])
    assert F.associate_many(ts, q).tolist() == [1, 1, -1, 0, 3]
    assert F.associate_many(np.array([]), q).tolist() == [-1] * 5


# --- groups agree with per-term blocks ----------------------------------------


def _pair_problem(grouped: bool, seed: int = 0):
    rng = np.random.default_rng(seed)
    n = 8
    truth = [random_pose(rng, 1.0, 2.0) for _ in range(n)]
    meas = [compose(T, se3_exp(rng.normal(size=6) * 0.02)) for T in truth]
    fixes = [F.UwbFix(float(k), T.translation + rng.normal(size=3) * 0.05) for k, T in enumerate(truth)]
    prob = Problem()
    ids = [prob.add_pose(compose(T, se3_exp(rng.normal(size=6) * 0.1))) for T in truth]
    T_um = prob.add_pose(random_pose(rng, 0.5, 1.0))
    odom_pos = [inverse(truth[0]).translation + T.translation for T in truth]
    loss = Loss.huber(0.1)
    if grouped:
        prob.add_residual_group(F.relative_pose_group(ids[1:], ids[:-1], meas[1:], meas[:-1], 10.0))
        prob.add_residual_group(F.uwb_position_group(ids, fixes, 1.0, loss))
        prob.add_residual_group(F.frame_transform_group(T_um, fixes, odom_pos, 1.0, loss))
    else:
        for k in range(1, n):
            prob.add_residual_block(F.relative_pose_block(ids[k], ids[k - 1], meas[k], meas[k - 1], 10.0))
        for vid, fx in zip(ids, fixes):
            prob.add_residual_block(F.uwb_position_block(vid, fx, 1.0, loss))
        for fx, q in zip(fixes, odom_pos):
            prob.add_residual_block(F.frame_transform_block(T_um, fx, q, 1.0, loss))
    return prob, ids + [T_um]


def test_pose_groups_match_blocks():
    pa, ids = _pair_problem(True)
    pb, _ = _pair_problem(False)
    assert pa.evaluate_cost()[0] == pytest.approx(pb.evaluate_cost()[0], rel=1e-12)
    ra, rb = solve(pa), solve(pb)
    assert ra.final_cost == pytest.approx(rb.final_cost, rel=1e-8)
    for i in ids:
        assert np.allclose(pa.value(i).matrix(), pb.value(i).matrix(), atol=1e-7)


def test_range_group_matches_blocks():
    rng = np.random.default_rng(1)
    anchor = np.array([1.0, 2.0, 1.5])
    Q = rng.uniform(-3, 3, size=(40, 3))
    z = [F.RangeMeasurement(0.0, 2, float(np.linalg.norm(anchor - q) + rng.normal() * 0.05)) for q in Q]

    def make(grouped):
        prob = Problem()
        v = prob.add_point(anchor + 0.3, fixed_mask=[False, False, True])
        if grouped:
            prob.add_residual_group(F.range_group(np.full(len(Q), v), Q, z, loss=Loss.huber(0.5)))
        else:
            for q, m in zip(Q, z):
                prob.add_residual_block(F.range_block(v, q, m, loss=Loss.huber(0.5)))
        return prob, v

    (pa, va), (pb, vb) = make(True), make(False)
    assert pa.evaluate_cost()[0] == pytest.approx(pb.evaluate_cost()[0], rel=1e-12)
    solve(pa)
    solve(pb)
    assert np.allclose(pa.value(va), pb.value(vb), atol=1e-8)
    assert pa.value(va)[2] == anchor[2] + 0.3


def test_range_group_counts_coincidences():
    diag = F.Diagnostics()
    g = F.range_group(np.array([0, 0]), [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [1.0, 1.0], diagnostics=diag)
    r, Js = g.fn([np.zeros((2, 3))], True)
    assert np.allclose(r[:, 0], [-1.0, 0.0])
    assert np.array_equal(Js[0][0], np.zeros((1, 3)))
    assert diag.range_coincidences == 1
