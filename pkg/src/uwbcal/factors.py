"""Residuals of the localization and calibration graphs, with analytic Jacobians.

Jacobians are w.r.t. right perturbations ``T ∘ exp(δ)`` for poses and plain
additive perturbations for points, matching ``fgo``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fgo import IDENTITY, Loss, ResidualBlock, ResidualGroup
from .geometry import (
    Pose,
    adjoint,
    adjoint_batch,
    between,
    inverse,
    poses_to_arrays,
    se3_log,
    se3_log_batch,
    se3_right_jacobian_inv,
    se3_right_jacobian_inv_batch,
    skew,
    skew_batch,
    transform_point,
)

# measurements further than this from any odometry timestamp are dropped
ASSOCIATION_GAP = 0.1


@dataclass(frozen=True)
class OdometryPose:
    timestamp: float
    pose: Pose


@dataclass(frozen=True)
class UwbFix:
    timestamp: float
    position: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError(f"non-finite UWB fix at t={self.timestamp}")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)


@dataclass(frozen=True)
class RangeMeasurement:
    timestamp: float
    anchor_id: int
    range: float

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError(f"range must be positive, got {self.range}")


@dataclass
class Diagnostics:
    dropped_fixes: int = 0
    dropped_ranges: int = 0
    range_coincidences: int = 0
    extra: dict = field(default_factory=dict)


def extract_position(T: Pose) -> np.ndarray:
    return T.translation


def relative_pose_residual(T_gk: Pose, T_gk1: Pose, meas_Tk: Pose, meas_Tk1: Pose) -> np.ndarray:
    """Log-map mismatch between estimated and measured body-frame increments.

    ``log( (meas_k1⁻¹ meas_k)⁻¹ (T_k1⁻¹ T_k) )``; zero iff the estimated
    motion from k-1 to k equals the odometry motion. Left-composing both
    estimates by a common pose leaves it unchanged.
    """
    meas = between(meas_Tk1, meas_Tk)
    est = between(T_gk1, T_gk)
    return se3_log(between(meas, est))


def relative_pose_jacobians(T_gk: Pose, T_gk1: Pose, meas_Tk: Pose, meas_Tk1: Pose):
    meas = between(meas_Tk1, meas_Tk)
    est = between(T_gk1, T_gk)
    r = se3_log(between(meas, est))
    Jinv = se3_right_jacobian_inv(r)
    # B⁻¹A with B ← B exp(δ) becomes B⁻¹A exp(-Ad((B⁻¹A)⁻¹) δ)
    J_k1 = -Jinv @ adjoint(inverse(est))
    return [Jinv, J_k1]


def uwb_position_residual(T_gk: Pose, fix: UwbFix) -> np.ndarray:
    return fix.position - T_gk.translation


def uwb_position_jacobian(T_gk: Pose) -> np.ndarray:
    J = np.zeros((3, 6))
    J[:, 3:] = -T_gk.rotation.matrix
    return J


def frame_transform_residual(T_um: Pose, fix: UwbFix, odom_pos) -> np.ndarray:
    return fix.position - transform_point(T_um, odom_pos)


def frame_transform_jacobian(T_um: Pose, odom_pos) -> np.ndarray:
    R = T_um.rotation.matrix
    J = np.empty((3, 6))
    J[:, :3] = R @ skew(odom_pos)
    J[:, 3:] = -R
    return J


def range_residual(anchor_pos, robot_pos, meas: RangeMeasurement) -> float:
    d = np.asarray(anchor_pos, dtype=float) - np.asarray(robot_pos, dtype=float)
    return math.sqrt(float(d @ d)) - meas.range


def range_jacobian(anchor_pos, robot_pos, diagnostics: Diagnostics | None = None) -> np.ndarray:
    """∂r/∂anchor; zero (and counted) when anchor and robot coincide."""
    d = np.asarray(anchor_pos, dtype=float) - np.asarray(robot_pos, dtype=float)
    n = math.sqrt(float(d @ d))
    if n < 1e-12:
        if diagnostics is not None:
            diagnostics.range_coincidences += 1
        return np.zeros((1, 3))
    return (d / n).reshape(1, 3)


# --- residual-block builders used by the pipeline graphs ---------------------


def relative_pose_block(vid_k: int, vid_k1: int, meas_k: Pose, meas_k1: Pose,
                        weight: float = 1.0, loss: Loss = IDENTITY) -> ResidualBlock:
    return ResidualBlock(
        (vid_k, vid_k1),
        6,
        lambda a, b: relative_pose_residual(a, b, meas_k, meas_k1),
        loss,
        weight,
        lambda a, b: relative_pose_jacobians(a, b, meas_k, meas_k1),
        name="relative_pose",
    )


def uwb_position_block(vid: int, fix: UwbFix, weight: float = 1.0, loss: Loss = IDENTITY) -> ResidualBlock:
    return ResidualBlock(
        (vid,),
        3,
        lambda T: uwb_position_residual(T, fix),
        loss,
        weight,
        lambda T: [uwb_position_jacobian(T)],
        name="uwb_position",
    )


def frame_transform_block(vid: int, fix: UwbFix, odom_pos, weight: float = 1.0,
                          loss: Loss = IDENTITY) -> ResidualBlock:
    odom_pos = np.array(odom_pos, dtype=float)
    return ResidualBlock(
        (vid,),
        3,
        lambda T: frame_transform_residual(T, fix, odom_pos),
        loss,
        weight,
        lambda T: [frame_transform_jacobian(T, odom_pos)],
        name="frame_transform",
    )


def range_block(vid: int, robot_pos, meas: RangeMeasurement, weight: float = 1.0,
                loss: Loss = IDENTITY, diagnostics: Diagnostics | None = None) -> ResidualBlock:
    robot_pos = np.array(robot_pos, dtype=float)
    return ResidualBlock(
        (vid,),
        1,
        lambda X: np.array([range_residual(X, robot_pos, meas)]),
        loss,
        weight,
        lambda X: [range_jacobian(X, robot_pos, diagnostics)],
        name=f"range[{meas.anchor_id}]",
    )


def associate(timestamps: np.ndarray, t: float, max_gap: float = ASSOCIATION_GAP) -> int | None:
    """Index of the nearest timestamp in the sorted array, or None beyond ``max_gap``."""
    n = len(timestamps)
    if n == 0:
        return None
    i = int(np.searchsorted(timestamps, t))
    best = None
    for j in (i - 1, i):
        if 0 <= j < n and (best is None or abs(timestamps[j] - t) < abs(timestamps[best] - t)):
            best = j
    if abs(timestamps[best] - t) > max_gap + 1e-12:
        return None
    return best


def associate_many(timestamps: np.ndarray, queries: np.ndarray, max_gap: float = ASSOCIATION_GAP) -> np.ndarray:
    """``associate`` for many queries at once; -1 marks a dropped query."""
    ts = np.asarray(timestamps, dtype=float)
    q = np.asarray(queries, dtype=float)
    if len(ts) == 0:
        return np.full(len(q), -1, dtype=np.int64)
    i = np.searchsorted(ts, q)
    lo = np.clip(i - 1, 0, len(ts) - 1)
    hi = np.clip(i, 0, len(ts) - 1)
    # ties go to the earlier timestamp, as in ``associate``
    best = np.where(np.abs(ts[hi] - q) < np.abs(ts[lo] - q), hi, lo)
    return np.where(np.abs(ts[best] - q) <= max_gap + 1e-12, best, -1).astype(np.int64)


# --- vectorized groups: same residuals, many terms per call ------------------


def relative_pose_group(vids_k, vids_k1, meas_k, meas_k1, weight: float = 1.0,
                        loss: Loss = IDENTITY) -> ResidualGroup:
    """Batch of relative-pose terms; ``meas_*`` are sequences of odometry poses."""
    Rk, tk = poses_to_arrays(meas_k)
    Rk1, tk1 = poses_to_arrays(meas_k1)
    # measured increment Z = meas_k1⁻¹ meas_k, stored inverted for the residual
    Rz = np.swapaxes(Rk1, 1, 2) @ Rk
    tz = np.einsum("mji,mj->mi", Rk1, tk - tk1)
    RzT = np.swapaxes(Rz, 1, 2)

    def fn(values, jacobians):
        (Ra, ta), (Rb, tb) = values
        RbT = np.swapaxes(Rb, 1, 2)
        Re = RbT @ Ra
        te = np.einsum("mij,mj->mi", RbT, ta - tb)
        RE = RzT @ Re
        tE = np.einsum("mij,mj->mi", RzT, te - tz)
        r = se3_log_batch(RE, tE)
        if not jacobians:
            return r, None
        Jinv = se3_right_jacobian_inv_batch(r)
        ReT = np.swapaxes(Re, 1, 2)
        Ad = adjoint_batch(ReT, -np.einsum("mij,mj->mi", ReT, te))
        return r, [Jinv, -Jinv @ Ad]

    ids = np.stack([np.asarray(vids_k), np.asarray(vids_k1)], axis=1)
    return ResidualGroup(ids, 6, fn, loss, weight, name="relative_pose")


def uwb_position_group(vids, fixes, weight: float = 1.0, loss: Loss = IDENTITY) -> ResidualGroup:
    F = np.array([f.position for f in fixes], dtype=float).reshape(-1, 3)

    def fn(values, jacobians):
        R, t = values[0]
        r = F - t
        if not jacobians:
            return r, None
        J = np.zeros((len(F), 3, 6))
        J[:, :, 3:] = -R
        return r, [J]

    return ResidualGroup(np.asarray(vids), 3, fn, loss, weight, name="uwb_position")


def frame_transform_group(vid: int, fixes, odom_positions, weight: float = 1.0,
                          loss: Loss = IDENTITY) -> ResidualGroup:
    F = np.array([f.position for f in fixes], dtype=float).reshape(-1, 3)
    Q = np.array(odom_positions, dtype=float).reshape(-1, 3)

    def fn(values, jacobians):
        R, t = values[0]
        r = F - np.einsum("mij,mj->mi", R, Q) - t
        if not jacobians:
            return r, None
        J = np.empty((len(F), 3, 6))
        J[:, :, :3] = R @ skew_batch(Q)
        J[:, :, 3:] = -R
        return r, [J]

    return ResidualGroup(np.full(len(F), vid), 3, fn, loss, weight, name="frame_transform")


def range_group(vids, robot_positions, ranges, weight: float = 1.0, loss: Loss = IDENTITY,
                diagnostics: Diagnostics | None = None) -> ResidualGroup:
    """Batch of anchor range terms; ``vids[i]`` is the anchor of ``ranges[i]``."""
    Q = np.array(robot_positions, dtype=float).reshape(-1, 3)
    z = np.array([m.range if isinstance(m, RangeMeasurement) else m for m in ranges], dtype=float)

    def fn(values, jacobians):
        d = values[0] - Q
        n = np.linalg.norm(d, axis=1)
        r = (n - z)[:, None]
        if not jacobians:
            return r, None
        coincide = n < 1e-12
        if coincide.any() and diagnostics is not None:
            diagnostics.range_coincidences += int(coincide.sum())
        J = np.where(coincide[:, None], 0.0, d / np.where(coincide, 1.0, n)[:, None])
        return r, [J[:, None, :]]

    return ResidualGroup(np.asarray(vids), 1, fn, loss, weight, name="range")
